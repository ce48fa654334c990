import numpy as np
import pytest

from aqrobust import attacks, constraints, data, mdp, nn


def linear_guesser(W, b=None):
    """Softmax head whose logits are exactly W s + b."""
    d_in = W.shape[1]
    net = nn.Network([nn.LayerSpec(d_in, 2, activation="softmax")])
    net.weights[0] = np.asarray(W, float)
    if b is not None:
        net.biases[0] = np.asarray(b, float)
    return net


def make_ctx(W, x, mask, label, b=None, **kw):
    return attacks.AttackContext(linear_guesser(W, b), x, mask, label, **kw)


def random_linear_ctx(d, seed, n_active=None):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(2, 2 * d))
    x = rng.uniform(-0.8, 0.8, size=d)
    mask = np.zeros(d)
    k = n_active or rng.integers(1, d + 1)
    mask[rng.choice(d, size=k, replace=False)] = 1.0
    ctx = make_ctx(W, x, mask, 0)
    label = int(np.argmax(ctx.probs(x)))
    return attacks.AttackContext(ctx.guesser, x, mask, label)


class TestProjectBall:
    def test_linf(self):
        d = np.array([0.5, -2.0, 0.1])
        np.testing.assert_allclose(attacks.project_ball(d, 0.3, "linf"),
                                   [0.3, -0.3, 0.1])

    def test_l2(self):
        d = np.array([3.0, 4.0])
        out = attacks.project_ball(d, 1.0, "l2")
        np.testing.assert_allclose(out, [0.6, 0.8])
        np.testing.assert_allclose(attacks.project_ball(d, 10.0, "l2"), d)

    def test_unknown_norm(self):
        with pytest.raises(ValueError):
            attacks.project_ball(np.zeros(2), 1.0, "l1")


class TestGradients:
    def test_grad_x_is_masked(self):
        ctx = random_linear_ctx(6, seed=0, n_active=3)
        g = ctx.grad_x(ctx.x_full)
        assert np.all(g[ctx.mask == 0] == 0.0)

    def test_grad_x_matches_linear_formula(self):
        # for logits z = W s, dCE(target)/dx = p_other * (W_other - W_target)[:d] * m
        ctx = random_linear_ctx(5, seed=1)
        p = ctx.probs(ctx.x_full)
        W = ctx.guesser.weights[0]
        o, t = ctx.true_label, ctx.target
        expect = p[o] * (W[o, :5] - W[t, :5]) * ctx.mask
        np.testing.assert_allclose(ctx.grad_x(ctx.x_full), expect, atol=1e-12)

    def test_grad_logit_diff_linear(self):
        ctx = random_linear_ctx(5, seed=2)
        W = ctx.guesser.weights[0]
        g = ctx.grad_logit_diff(ctx.x_full, 0, 1)
        np.testing.assert_allclose(g, (W[0, :5] - W[1, :5]) * ctx.mask,
                                   atol=1e-12)


class TestMaskInvariance:
    @pytest.mark.parametrize("method", list(attacks.ATTACKS))
    def test_unanswered_coords_untouched(self, method):
        for seed in range(5):
            ctx = random_linear_ctx(8, seed=seed, n_active=4)
            cfg = attacks.AttackConfig(epsilon=0.5)
            r = attacks.run_attack(method, ctx, cfg)
            inactive = ctx.mask == 0
            assert np.all(r.delta[inactive] == 0.0)
            assert np.all(r.x_adv[inactive] == ctx.x_full[inactive])
            # state halves are consistent
            np.testing.assert_array_equal(r.state_adv[8:], ctx.mask)
            assert np.all(r.state_adv[:8][inactive] == 0.0)


class TestFGSM:
    def test_matches_sign_oracle(self):
        ctx = random_linear_ctx(6, seed=3)
        cfg = attacks.AttackConfig(epsilon=0.2)
        r = attacks.fgsm(ctx, cfg)
        W = ctx.guesser.weights[0]
        o, t = ctx.true_label, ctx.target
        direction = np.sign((W[t, :6] - W[o, :6])) * ctx.mask
        expect = np.clip(ctx.x_full + 0.2 * direction, -1, 1) - ctx.x_full
        np.testing.assert_allclose(r.delta, expect * ctx.mask, atol=1e-12)

    def test_moves_probability_toward_target(self):
        for seed in range(10):
            ctx = random_linear_ctx(6, seed=seed)
            r = attacks.fgsm(ctx, attacks.AttackConfig(epsilon=0.3))
            assert r.probs_adv[ctx.target] >= r.probs_clean[ctx.target]

    def test_epsilon_zero_is_identity(self):
        ctx = random_linear_ctx(6, seed=4)
        r = attacks.fgsm(ctx, attacks.AttackConfig(epsilon=0.0))
        assert r.delta_l2 == 0.0
        assert not r.success


class TestIterative:
    def test_pgd_stays_in_ball(self):
        for norm in ("linf", "l2"):
            ctx = random_linear_ctx(6, seed=5)
            cfg = attacks.AttackConfig(epsilon=0.4, norm=norm, iterations=40)
            r = attacks.pgd(ctx, cfg)
            if norm == "linf":
                assert r.delta_linf <= 0.4 + 1e-12
            else:
                assert r.delta_l2 <= 0.4 + 1e-12

    def test_bim_respects_epsilon(self):
        ctx = random_linear_ctx(6, seed=6)
        r = attacks.bim(ctx, attacks.AttackConfig(epsilon=0.25, iterations=40))
        assert r.delta_linf <= 0.25 + 1e-12

    def test_iterative_at_least_as_strong_as_fgsm_on_linear(self):
        # on a linear model the linf-optimal step is the sign step, so PGD or
        # BIM with a full budget should match FGSM's achieved target prob
        for seed in range(5):
            ctx = random_linear_ctx(6, seed=seed + 10)
            cfg = attacks.AttackConfig(epsilon=0.3, iterations=40)
            pf = attacks.fgsm(ctx, cfg).probs_adv[ctx.target]
            pb = attacks.bim(ctx, cfg).probs_adv[ctx.target]
            assert pb >= pf - 1e-9


class TestCW:
    def test_finds_small_perturbation_near_boundary(self):
        # boundary at x0 + distance along unit w; large c forces crossing
        d = 4
        W = np.zeros((2, 2 * d))
        W[0, 0] = 1.0  # z0 - z1 = x[0]
        x = np.array([0.05, 0.3, -0.2, 0.1])
        ctx = make_ctx(W, x, np.ones(d), 0)
        cfg = attacks.AttackConfig(epsilon=1.0, cw_c=50.0, cw_iterations=300)
        r = attacks.cw(ctx, cfg)
        assert r.success
        # analytic boundary distance is 0.05; allow 10% plus a small pad
        assert r.delta_l2 <= 0.05 * 1.10 + 0.01

    def test_epsilon_filters_success(self):
        d = 4
        W = np.zeros((2, 2 * d))
        W[0, 0] = 1.0
        x = np.array([0.5, 0.0, 0.0, 0.0])   # boundary distance 0.5
        ctx = make_ctx(W, x, np.ones(d), 0)
        cfg = attacks.AttackConfig(epsilon=0.1, cw_c=50.0, cw_iterations=300)
        r = attacks.cw(ctx, cfg)
        assert not r.success

    def test_default_c_moves_little(self):
        ctx = random_linear_ctx(6, seed=7)
        r = attacks.cw(ctx, attacks.AttackConfig(epsilon=2.0))
        assert r.delta_l2 < 0.5


class TestDeepFool:
    def test_linear_analytic_distance(self):
        # one linearization step is exact on a linear model; put the decision
        # boundary close by (via the bias) so the box never clips
        for seed in range(10):
            rng = np.random.default_rng(seed + 20)
            W = rng.normal(size=(2, 12))
            x = rng.uniform(-0.5, 0.5, size=6)
            mask = np.ones(6)
            s = np.concatenate([x, mask])
            z = W @ s
            label = 0
            b = np.array([0.0, z[0] - z[1] - 0.1])   # f = z0 - z1 = 0.1
            ctx = make_ctx(W, x, mask, label, b=b)
            w = ctx.grad_logit_diff(x, 0, 1)
            expect = (1.0 + 0.02) * 0.1 / np.linalg.norm(w)
            r = attacks.deepfool(ctx, attacks.AttackConfig(epsilon=np.inf))
            np.testing.assert_allclose(r.delta_l2, expect, rtol=1e-9)
            assert r.success
            assert r.iterations == 1

    def test_epsilon_filters_success(self):
        ctx = random_linear_ctx(6, seed=21, n_active=6)
        r = attacks.deepfool(ctx, attacks.AttackConfig(epsilon=1e-9))
        if r.delta_l2 > 1e-9:
            assert not r.success


class TestAutoAttack:
    def test_success_is_union_of_members(self):
        for seed in range(8):
            ctx = random_linear_ctx(6, seed=seed + 30)
            cfg = attacks.AttackConfig(epsilon=0.5, cw_c=50.0,
                                       cw_iterations=200)
            rs = [attacks.fgsm(ctx, cfg), attacks.pgd(ctx, cfg),
                  attacks.cw(ctx, cfg)]
            ra = attacks.autoattack(ctx, cfg)
            assert ra.success == any(r.success for r in rs)

    def test_returns_first_success(self):
        ctx = random_linear_ctx(6, seed=31)
        cfg = attacks.AttackConfig(epsilon=2.0)
        rf = attacks.fgsm(ctx, cfg)
        ra = attacks.autoattack(ctx, cfg)
        if rf.success:
            np.testing.assert_array_equal(ra.x_adv, rf.x_adv)

    def test_wall_time_accumulates(self):
        ctx = random_linear_ctx(6, seed=32)
        cfg = attacks.AttackConfig(epsilon=1e-12)  # nothing succeeds
        ra = attacks.autoattack(ctx, cfg)
        assert ra.wall_time > 0
        assert ra.iterations >= 1 + cfg.iterations + cfg.cw_iterations


@pytest.fixture(scope="module")
def clinical():
    import importlib.resources as res
    pkg = res.files("aqrobust") / "data"
    schema = data.read_schema(pkg / "reference_schema.txt")
    cset = constraints.load_catalog_file(pkg / "reference_catalog.txt", schema)
    colmap = data.ColumnMap(schema)
    return schema, cset, colmap


class TestConstraintIntegration:
    def _ctx(self, clinical, seed=0):
        schema, cset, colmap = clinical
        raw = np.array([45.0, 1.0, 0.0, 1.0, 150.0, 130.0, 27.0, 0.0, 0.0, 0.0])
        x = colmap.to_norm_row(raw)
        rng = np.random.default_rng(seed)
        W = rng.normal(size=(2, 2 * colmap.n_cols))
        g = linear_guesser(W)
        label = int(np.argmax(nn.forward(
            g, np.concatenate([x, np.ones_like(x)])).out()))
        return attacks.AttackContext(g, x, np.ones_like(x), label,
                                     schema=schema, colmap=colmap, cset=cset)

    @pytest.mark.parametrize("method", list(attacks.ATTACKS))
    def test_adversarial_record_is_medically_valid(self, clinical, method):
        schema, cset, colmap = clinical
        ctx = self._ctx(clinical)
        cfg = attacks.AttackConfig(epsilon=1.0)
        r = attacks.run_attack(method, ctx, cfg)
        raw = constraints.to_raw(r.x_adv, schema, colmap, strict=False)
        report = constraints.check(raw, cset)
        assert report.valid, report.violations
        if method not in ("bim",):  # bim constrains only at the end too
            assert r.resolution in (constraints.AUTOMATIC,
                                    constraints.ITERATIVE,
                                    constraints.IRRECONCILABLE)

    def test_resolution_reported(self, clinical):
        ctx = self._ctx(clinical)
        r = attacks.fgsm(ctx, attacks.AttackConfig(epsilon=1.5))
        assert r.resolution in (constraints.AUTOMATIC, constraints.ITERATIVE,
                                constraints.IRRECONCILABLE)
