"""The questionnaire decision process.

A value network picks which question to reveal next; a classifier head (the
"guesser") maps the masked state to risk probabilities.  The state is the
concatenation of the masked feature vector and the mask itself,
s = [x * m, m], of length 2d.  Reveals are deterministic: asking question i
sets m over that question's columns and copies in the ground-truth values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn


class EpisodeError(ValueError):
    pass


@dataclass
class MDPConfig:
    d: int
    max_questions: int = 8
    gamma: float = 0.95
    intermediate_reward_sigma: float = 0.01
    # optional early guess once the classifier is confident; off by default
    confidence_threshold: float = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.max_questions > self.d:
            raise ValueError("max_questions cannot exceed the question count")
        if self.intermediate_reward_sigma < 0:
            raise ValueError("reward sigma must be >= 0")


@dataclass
class EpisodeTrace:
    steps: list = field(default_factory=list)   # (question, revealed values, reward)
    guess_probs: np.ndarray = None
    predicted: int = None
    true_label: int = None
    final_state: np.ndarray = None
    question_mask: np.ndarray = None            # question-level mask at guess time
    column_mask: np.ndarray = None

    def to_json(self):
        return json.dumps(
            {
                "steps": [
                    {"question": int(q), "revealed": [float(v) for v in np.atleast_1d(vals)],
                     "reward": float(r)}
                    for q, vals, r in self.steps
                ],
                "guess_probs": [float(p) for p in self.guess_probs],
                "predicted": int(self.predicted),
                "true_label": int(self.true_label),
            },
            sort_keys=True,
        )


@dataclass
class ModelBundle:
    """Both trained networks plus the layout they were trained against."""

    dqn: nn.Network
    guesser: nn.Network
    n_questions: int
    n_cols: int
    question_groups: list
    config: dict = field(default_factory=dict)

    def save(self, path):
        import io

        meta = {
            "format": "aqrobust-bundle-v1",
            "dqn_specs": [nn._spec_to_dict(s) for s in self.dqn.specs],
            "guesser_specs": [nn._spec_to_dict(s) for s in self.guesser.specs],
            "n_questions": self.n_questions,
            "n_cols": self.n_cols,
            "question_groups": self.question_groups,
            "config": self.config,
        }
        arrays = {}
        for prefix, net in (("d", self.dqn), ("g", self.guesser)):
            for i, a in enumerate(nn._all_arrays(net)):
                arrays[f"{prefix}{i}"] = a
        arrays["__meta__"] = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
        )
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path):
        with np.load(path) as blob:
            meta = json.loads(bytes(blob["__meta__"]).decode())
            if meta.get("format") != "aqrobust-bundle-v1":
                raise ValueError(f"{path}: not a model bundle")
            nets = {}
            for prefix, key in (("d", "dqn_specs"), ("g", "guesser_specs")):
                specs = [nn.LayerSpec(**d) for d in meta[key]]
                net = nn.Network(specs)
                arrays = [blob[f"{prefix}{i}"] for i in range(len(nn._all_arrays(net)))]
                n_params = len(net.params())
                net.set_params(arrays[:n_params])
                extra = iter(arrays[n_params:])
                for i, spec in enumerate(net.specs):
                    if spec.has_batchnorm:
                        net.bn[i]["mean"] = next(extra).copy()
                        net.bn[i]["var"] = next(extra).copy()
                nets[prefix] = net
        return cls(
            dqn=nets["d"],
            guesser=nets["g"],
            n_questions=meta["n_questions"],
            n_cols=meta["n_cols"],
            question_groups=[list(g) for g in meta["question_groups"]],
            config=meta["config"],
        )


def default_architecture(n_cols, n_questions, dropout=0.1, guesser_batchnorm=True):
    """DQN 2d->128->128->d (ReLU); guesser 2d->256->256->128->2 (PReLU)."""
    s = 2 * n_cols
    dqn_specs = [
        nn.LayerSpec(s, 128, activation="relu", dropout_rate=dropout),
        nn.LayerSpec(128, 128, activation="relu", dropout_rate=dropout),
        nn.LayerSpec(128, n_questions, activation="linear"),
    ]
    guesser_specs = [
        nn.LayerSpec(s, 256, activation="prelu", has_batchnorm=guesser_batchnorm,
                     dropout_rate=dropout),
        nn.LayerSpec(256, 256, activation="prelu", has_batchnorm=guesser_batchnorm,
                     dropout_rate=dropout),
        nn.LayerSpec(256, 128, activation="prelu", has_batchnorm=guesser_batchnorm,
                     dropout_rate=dropout),
        nn.LayerSpec(128, 2, activation="softmax"),
    ]
    return dqn_specs, guesser_specs


def make_state(x_answered, m):
    """s = concat(x * m, m); masked-out coordinates are exactly zero."""
    x = np.asarray(x_answered, float)
    m = np.asarray(m, float)
    if x.shape != m.shape:
        raise EpisodeError(f"x/m length mismatch: {x.shape} vs {m.shape}")
    return np.concatenate([x * m, m], axis=-1)


def select_question(dqn, state, asked_mask, epsilon, rng):
    """Epsilon-greedy over unasked questions; ties break to the lowest index."""
    asked = np.asarray(asked_mask)
    unasked = np.where(asked == 0)[0]
    if unasked.size == 0:
        raise EpisodeError("all questions have been asked")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(unasked))
    q = nn.forward(dqn, state).out()
    masked = np.where(asked == 0, q, -np.inf)
    return int(np.argmax(masked))


def guess(guesser, state):
    """Class probabilities (low-risk, high-risk) for a masked state."""
    p = nn.forward(guesser, state).out()
    return p


def step_reward(phase, guess_probs=None, true_label=None, rng=None, sigma=0.01):
    if phase == "intermediate":
        if sigma == 0:
            return 0.0
        return float(rng.normal(0.0, sigma))
    if phase == "guess":
        return float(guess_probs[true_label])
    if phase == "terminal":
        return 1.0 if int(np.argmax(guess_probs)) == true_label else -1.0
    raise ValueError(f"unknown phase {phase!r}")


def _reveal(x, m_cols, features, group):
    for c in group:
        m_cols[c] = 1.0
        x[c] = features[c]


def run_episode(bundle, patient_features, true_label, config, epsilon, rng):
    """Ask up to max_questions, then guess.  Returns a full EpisodeTrace."""
    features = np.asarray(patient_features, float)
    d = bundle.n_cols
    if features.shape[0] != d:
        raise EpisodeError(f"feature length {features.shape[0]} != {d}")
    x = np.zeros(d)
    m_cols = np.zeros(d)
    asked = np.zeros(bundle.n_questions)
    trace = EpisodeTrace(true_label=int(true_label))

    for _ in range(config.max_questions):
        state = make_state(x, m_cols)
        qi = select_question(bundle.dqn, state, asked, epsilon, rng)
        asked[qi] = 1.0
        group = bundle.question_groups[qi]
        _reveal(x, m_cols, features, group)
        r = step_reward("intermediate", rng=rng, sigma=config.intermediate_reward_sigma)
        trace.steps.append((qi, features[group].copy(), r))
        if config.confidence_threshold is not None:
            p = guess(bundle.guesser, make_state(x, m_cols))
            if p.max() >= config.confidence_threshold:
                break

    final_state = make_state(x, m_cols)
    probs = guess(bundle.guesser, final_state)
    trace.guess_probs = probs
    trace.predicted = int(np.argmax(probs))
    trace.final_state = final_state
    trace.question_mask = asked
    trace.column_mask = m_cols
    return trace


def run_greedy_batch(bundle, features, max_questions):
    """Vectorized greedy (epsilon = 0) episodes for a batch of patients.

    Returns (final states, column masks, question masks, guess probs).
    Used by validation and by the evaluation harness, where determinism
    matters and no rewards are needed.
    """
    features = np.asarray(features, float)
    B, d = features.shape
    x = np.zeros((B, d))
    m_cols = np.zeros((B, d))
    asked = np.zeros((B, bundle.n_questions))
    rows = np.arange(B)
    group_cols = [np.array(g) for g in bundle.question_groups]
    for _ in range(max_questions):
        states = np.concatenate([x * m_cols, m_cols], axis=1)
        q = nn.forward(bundle.dqn, states).output
        q = np.where(asked == 0, q, -np.inf)
        choice = np.argmax(q, axis=1)
        asked[rows, choice] = 1.0
        for qi in np.unique(choice):
            sel = rows[choice == qi]
            cols = group_cols[qi]
            m_cols[np.ix_(sel, cols)] = 1.0
            x[np.ix_(sel, cols)] = features[np.ix_(sel, cols)]
    states = np.concatenate([x * m_cols, m_cols], axis=1)
    probs = nn.forward(bundle.guesser, states).output
    return states, m_cols, asked, probs
