"""Training loop for the questionnaire models.

Two networks learn in alternation: the question-selection network by
Q-learning against a replay buffer and a frozen target copy, the classifier
by cross-entropy on episode-final states.  Model selection is by validation
AUC with patience-based early stopping.
"""

from __future__ import annotations

import collections
import csv
from dataclasses import dataclass, field

import numpy as np

from . import mdp, nn


@dataclass
class TrainConfig:
    max_episodes: int = 50000
    max_questions: int = 8
    gamma: float = 0.95
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 17500
    lr_min: float = 1e-6
    batch_size: int = 32
    replay_capacity: int = 1000
    update_every: int = 4           # environment steps between Q updates
    target_update_every: int = 10   # episodes between hard target copies
    alternate_every: int = 1000     # episodes per DQN / guesser training block
    val_every: int = 1000           # episodes between validation passes
    patience: int = 50              # validation checks without improvement
    val_fraction: float = 0.05
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.2
    dropout: float = 0.1
    guesser_batchnorm: bool = True
    intermediate_reward_sigma: float = 0.01
    seed: int = 0

    def epsilon_at(self, episode):
        horizon = max(1, int(self.epsilon_decay_fraction * self.max_episodes))
        if episode >= horizon:
            return self.epsilon_end
        frac = episode / horizon
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def lr_at(config, opt_step):
    """Step-decayed learning rate with a hard floor."""
    lr = config.lr * config.lr_decay ** (opt_step // config.lr_decay_every)
    return max(lr, config.lr_min)


class ReplayBuffer:
    """Fixed-capacity FIFO of (s, a, r, s', done, unasked-next) transitions."""

    def __init__(self, capacity):
        self._q = collections.deque(maxlen=capacity)

    def __len__(self):
        return len(self._q)

    def push(self, s, a, r, s2, done, avail2):
        self._q.append((s, int(a), float(r), s2, bool(done), avail2))

    def sample(self, batch_size, rng):
        idx = rng.integers(0, len(self._q), size=batch_size)
        items = [self._q[i] for i in idx]
        s = np.stack([it[0] for it in items])
        a = np.array([it[1] for it in items])
        r = np.array([it[2] for it in items])
        s2 = np.stack([it[3] for it in items])
        done = np.array([it[4] for it in items])
        avail2 = np.stack([it[5] for it in items])
        return s, a, r, s2, done, avail2


def auc(scores, labels):
    """Area under the ROC curve by rank statistic; ties count one half."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        return 0.5
    order = np.argsort(np.concatenate([neg, pos]), kind="mergesort")
    ranks = np.empty(order.size, float)
    sorted_scores = np.concatenate([neg, pos])[order]
    # average ranks over tied groups
    i = 0
    while i < order.size:
        j = i
        while j + 1 < order.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum_pos = ranks[neg.size:].sum()
    return float((rank_sum_pos - pos.size * (pos.size + 1) / 2.0)
                 / (pos.size * neg.size))


def replay_update(bundle, target_dqn, buffer, opt, config, rng):
    """One Q-learning step on a sampled minibatch."""
    s, a, r, s2, done, avail2 = buffer.sample(config.batch_size, rng)
    q2 = nn.forward(target_dqn, s2).output
    q2 = np.where(avail2, q2, -np.inf)
    q2_max = q2.max(axis=1)
    q2_max = np.where(np.isfinite(q2_max), q2_max, 0.0)
    y = r + config.gamma * q2_max * (~done)

    bundle.dqn.mode = nn.TRAIN
    trace = nn.forward(bundle.dqn, s, rng=rng)
    bundle.dqn.mode = nn.EVAL
    q = trace.output
    B = s.shape[0]
    d_out = np.zeros_like(q)
    d_out[np.arange(B), a] = 2.0 * (q[np.arange(B), a] - y) / B
    grads, _ = nn.backward(bundle.dqn, trace, d_output=d_out)
    nn.adam_step(bundle.dqn, grads, opt, lr_at(config, opt.step))


class StateBuffer:
    """FIFO of (episode-final state, label) pairs for classifier updates."""

    def __init__(self, capacity):
        self._q = collections.deque(maxlen=capacity)

    def __len__(self):
        return len(self._q)

    def push(self, state, label):
        self._q.append((state, int(label)))

    def sample(self, batch_size, rng):
        idx = rng.integers(0, len(self._q), size=batch_size)
        states = np.stack([self._q[i][0] for i in idx])
        labels = np.array([self._q[i][1] for i in idx])
        return states, labels


def guesser_update(bundle, states, labels, opt, config, rng):
    """One supervised cross-entropy step on episode-final states."""
    bundle.guesser.mode = nn.TRAIN
    trace = nn.forward(bundle.guesser, np.stack(states), rng=rng)
    bundle.guesser.mode = nn.EVAL
    grads = nn.grad_params(bundle.guesser, trace, "cross_entropy",
                           np.asarray(labels, int))
    nn.adam_step(bundle.guesser, grads, opt, lr_at(config, opt.step))


def update_target(bundle, target_dqn):
    target_dqn.set_params([p.copy() for p in bundle.dqn.params()])
    for i, spec in enumerate(bundle.dqn.specs):
        if spec.has_batchnorm:
            target_dqn.bn[i]["mean"][...] = bundle.dqn.bn[i]["mean"]
            target_dqn.bn[i]["var"][...] = bundle.dqn.bn[i]["var"]


def validate(bundle, X, y, max_questions):
    _, _, _, probs = mdp.run_greedy_batch(bundle, X, max_questions)
    scores = probs[:, 1]
    return auc(scores, y), float(np.mean((scores >= 0.5) == (y == 1)))


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (episode, auc, accuracy, lr)

    def append(self, episode, val_auc, accuracy, lr):
        self.rows.append((int(episode), float(val_auc), float(accuracy), float(lr)))

    @property
    def best_auc(self):
        return max(r[1] for r in self.rows) if self.rows else 0.0

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "val_auc", "val_accuracy", "lr"])
            for row in self.rows:
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}",
                            f"{row[3]:.8g}"])


def train(dataset_X, dataset_y, question_groups, config=None, progress=None):
    """Train both networks.  Returns (best bundle, TrainHistory).

    `dataset_X` is the normalized feature matrix, `dataset_y` the binary
    labels, `question_groups` the column indices revealed per question.
    A validation slice is held out from the end of the data.
    """
    config = config or TrainConfig()
    X = np.asarray(dataset_X, float)
    y = np.asarray(dataset_y, int)
    n, d = X.shape
    n_val = max(1, int(round(config.val_fraction * n)))
    X_tr, y_tr = X[:-n_val], y[:-n_val]
    X_val, y_val = X[-n_val:], y[-n_val:]
    if X_tr.shape[0] == 0:
        raise ValueError("no training rows left after the validation split")

    rng = np.random.default_rng(config.seed)
    n_q = len(question_groups)
    dqn_specs, guesser_specs = mdp.default_architecture(
        d, n_q, dropout=config.dropout, guesser_batchnorm=config.guesser_batchnorm)
    bundle = mdp.ModelBundle(
        dqn=nn.xavier_init(dqn_specs, config.seed),
        guesser=nn.xavier_init(guesser_specs, config.seed + 1),
        n_questions=n_q,
        n_cols=d,
        question_groups=[list(g) for g in question_groups],
        config={"train": {"seed": config.seed, "max_questions": config.max_questions}},
    )
    target_dqn = bundle.dqn.copy()
    buffer = ReplayBuffer(config.replay_capacity)
    states_buf = StateBuffer(config.replay_capacity)
    opt_dqn = nn.AdamState.for_network(bundle.dqn)
    opt_guesser = nn.AdamState.for_network(bundle.guesser)
    mdp_cfg = mdp.MDPConfig(
        d=n_q, max_questions=config.max_questions, gamma=config.gamma,
        intermediate_reward_sigma=config.intermediate_reward_sigma)

    history = TrainHistory()
    best = None
    best_auc = -1.0
    stale = 0
    env_steps = 0

    for episode in range(config.max_episodes):
        i = int(rng.integers(0, X_tr.shape[0]))
        eps = config.epsilon_at(episode)
        trace = mdp.run_episode(bundle, X_tr[i], y_tr[i], mdp_cfg, eps, rng)

        # Reconstruct per-step transitions from the trace.
        x_cur = np.zeros(d)
        m_cur = np.zeros(d)
        asked = np.zeros(n_q)
        n_steps = len(trace.steps)
        # classifier trains first: question values are meaningless until the
        # guess probabilities carry signal
        phase_dqn = (episode // config.alternate_every) % 2 == 1
        for k, (qi, vals, r) in enumerate(trace.steps):
            s = mdp.make_state(x_cur, m_cur)
            cols = bundle.question_groups[qi]
            x_cur[cols] = vals
            m_cur[cols] = 1.0
            asked = asked.copy()
            asked[qi] = 1.0
            s2 = mdp.make_state(x_cur, m_cur)
            done = k == n_steps - 1
            if done:
                r = r + mdp.step_reward("guess", trace.guess_probs, trace.true_label)
                r = r + mdp.step_reward("terminal", trace.guess_probs,
                                        trace.true_label)
            buffer.push(s, qi, r, s2, done, asked == 0)
            env_steps += 1
            if (phase_dqn and len(buffer) >= config.batch_size
                    and env_steps % config.update_every == 0):
                replay_update(bundle, target_dqn, buffer, opt_dqn, config, rng)

        states_buf.push(trace.final_state, trace.true_label)
        if not phase_dqn and len(states_buf) >= config.batch_size:
            states, labels = states_buf.sample(config.batch_size, rng)
            guesser_update(bundle, states, labels, opt_guesser, config, rng)

        if (episode + 1) % config.target_update_every == 0:
            update_target(bundle, target_dqn)

        if (episode + 1) % config.val_every == 0:
            val_auc, val_acc = validate(bundle, X_val, y_val,
                                        config.max_questions)
            history.append(episode + 1, val_auc, val_acc,
                           lr_at(config, opt_dqn.step))
            if progress is not None:
                progress(episode + 1, val_auc, val_acc)
            if val_auc > best_auc:
                best_auc = val_auc
                best = mdp.ModelBundle(
                    dqn=bundle.dqn.copy(), guesser=bundle.guesser.copy(),
                    n_questions=n_q, n_cols=d,
                    question_groups=[list(g) for g in bundle.question_groups],
                    config=dict(bundle.config, best_episode=episode + 1,
                                best_auc=val_auc))
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

    if best is None:
        best = bundle
    return best, history
