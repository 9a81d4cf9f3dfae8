"""Acceptance criteria, one test each; every test records a pass/fail line shown in the terminal summary.

Criterion 1 trains both variants at full size (about 40 minutes single-core per
training seed). Set OG_ACCEPT_DIR to keep its dataset, checkpoints and reports.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from orientgate import data, evaluate as ev, expert, perception, sim
from orientgate import tensor as tc
from orientgate.policy import ACTPolicy, ModelConfig
from orientgate.tensor import Tensor
from orientgate.train import TrainConfig, kl_divergence, loss, train

from test_policy import MINI, as_float64
from test_tensor import OP_CASES, scalar_adam


# ---------------------------------------------------------------- 2. expert quality

def test_expert_quality(criterion):
    t0 = time.perf_counter()
    rates = {}
    for theta in (0, 22.5, 45):
        wins = 0
        for seed in range(100):
            s = sim.reset(theta, 0.01, seed)
            rng = np.random.default_rng([seed, 1])
            for _ in range(s.geometry.episode_len):
                s = sim.step(s, expert.expert_action(s, rng))
            wins += sim.check_success(s)
        rates[theta] = wins / 100
    elapsed = time.perf_counter() - t0
    ok = all(r >= 0.95 for r in rates.values()) and elapsed <= 120
    criterion(2, ok, f"expert success {rates} over 100 jittered episodes each, {elapsed:.1f}s (<= 120s)")
    assert ok


# ---------------------------------------------------------------- 3. gradient suite

def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst = {}
    for kind, (fn, arrays) in sorted(OP_CASES.items()):
        leaves = [Tensor(np.asarray(a, np.float64), requires_grad=True) for a in arrays]
        probe = {}

        def f():
            out = fn(*leaves)
            if out.data.size == 1:
                return out
            if "w" not in probe:
                probe["w"] = Tensor(np.random.default_rng(7).standard_normal(out.shape))
            return tc.sum_(tc.mul(out, probe["w"]))

        worst[kind] = max(tc.gradcheck(f, leaves, h=1e-3))

    for variant in ("baseline", "gated"):
        m = as_float64(ACTPolicy(ModelConfig(variant=variant, **MINI), seed=1))
        r = np.random.default_rng(0)
        if variant == "gated":
            m.store["gate.2.w"].data[:] = r.standard_normal(m.store["gate.2.w"].shape)
        c = m.config
        scene = r.random((2, c.image_size, c.image_size)).astype(np.float32)
        joints = r.standard_normal((2, c.joint_dim)).astype(np.float32)
        chunk = r.standard_normal((2, c.chunk, c.action_dim)).astype(np.float32)
        vec = r.standard_normal((2, 2)).astype(np.float32)
        eps = r.standard_normal((2, c.latent_dim))

        class Fixed:
            def standard_normal(self, shape):
                return eps

        def f():
            pred, mu, logvar = m.forward_train(scene, joints, chunk, vec, Fixed())
            d = tc.sub(pred, Tensor(chunk.astype(np.float64)))
            return tc.add(tc.mean(tc.mul(d, d)), tc.mul(kl_divergence(mu, logvar), 0.1))

        names = m.store.names()
        errs = tc.gradcheck(f, [m.store[n] for n in names], h=1e-5)
        worst[f"model[{variant}]"] = max(errs)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= 1e-3 and elapsed <= 60
    criterion(3, ok, f"{len(OP_CASES)} ops + miniature model (both variants): max rel err {top:.2e} "
                     f"(<= 1e-3), {elapsed:.1f}s (<= 60s)")
    assert ok, worst


# ---------------------------------------------------------------- 4. spatial softmax

def test_spatial_softmax_oracle(criterion):
    r = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        m = (r.random((64, 64)) < r.uniform(0.001, 0.9)).astype(np.uint8)
        if not m.any():
            m[r.integers(64), r.integers(64)] = 1
        worst = max(worst, np.abs(perception.spatial_softmax(m, 0.05) - perception.centroid(m)).max())

    single = np.zeros((64, 64))
    single[16, 48] = 1
    centre = np.array([(48 + 0.5) / 32 - 1, 1 - (16 + 0.5) / 32])
    single_err = np.abs(perception.spatial_softmax(single, 0.01) - centre).max()
    single_err_default = np.abs(perception.spatial_softmax(single, 0.05) - centre).max()
    pair = np.zeros((64, 64))
    pair[10, 20] = pair[53, 43] = 1
    pair_err = np.abs(perception.spatial_softmax(pair, 0.05)).max()
    ok = worst <= 1 / 64 and single_err <= 1e-6 and pair_err <= 1e-6
    criterion(4, ok, f"1000 masks max |kp - centroid| {worst:.2e} (<= {1 / 64:.4f}); single pixel err "
                     f"{single_err:.1e} at tau 0.01 ({single_err_default:.1e} at tau 0.05, e^-20 leak); "
                     f"symmetric pair err {pair_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 5. gate and mixture

def test_gate_and_mixture(criterion):
    r = np.random.default_rng(5)
    m = ACTPolicy(ModelConfig(variant="gated"), seed=3)
    for name in ("gate.1.w", "gate.1.b", "gate.2.w", "gate.2.b"):
        m.store[name].data[:] = r.standard_normal(m.store[name].shape) * 2
    w = m.gate_weights(r.standard_normal((10_000, 2)) * 3).data.astype(np.float64)
    simplex_err = np.abs(w.sum(-1) - 1).max()
    nonneg = bool(np.all(w >= 0))

    hidden = Tensor(r.standard_normal((4, 16, 64)).astype(np.float32))
    heads = m.head_outputs(hidden).data.astype(np.float64)
    wts = r.dirichlet(np.ones(4), size=4).astype(np.float32)
    oracle = np.einsum("bh,bkha->bka", wts.astype(np.float64), heads)
    mix_err = np.abs(m.gated_output(hidden, Tensor(wts)).data - oracle).max()

    onehot_ok = True
    for h in range(4):
        oh = np.zeros((4, 4), np.float32)
        oh[:, h] = 1
        onehot_ok &= np.array_equal(m.gated_output(hidden, Tensor(oh)).data, m.head_outputs(hidden).data[:, :, h])
    ok = simplex_err <= 1e-6 and nonneg and mix_err <= 1e-6 and onehot_ok
    criterion(5, ok, f"10^4 gate outputs: max |sum-1| {simplex_err:.1e}, nonneg {nonneg}; weighted-sum oracle "
                     f"err {mix_err:.1e} (<= 1e-6); one-hot exact {onehot_ok}")
    assert ok


# ---------------------------------------------------------------- 6. frozen vector

def test_frozen_vector_protocol(criterion):
    gated = ACTPolicy(ModelConfig(variant="gated"), seed=0)
    worst = 0.0
    for theta, seed in ((0, 1_000_000), (22.5, 1_000_001), (45, 1_000_002), (200, 1_000_003)):
        r = ev.rollout(gated, theta, seed)
        mean10 = r.step_vectors[:10].mean(axis=0)
        worst = max(worst, np.abs(r.used_vectors[10:] - mean10).max())
        assert len(r.step_vectors) == 10
    ep = data.run_expert_episode(45, 3, 0.01)
    v = ep.vectors()
    worst = max(worst, np.abs(v[10:] - v[9]).max())

    base = ACTPolicy(ModelConfig(variant="baseline"), seed=0)
    scene = perception.scene_from_bytes(ep.scene[0])[None]
    joints = ep.proprio()[:1]
    ref = base.forward_infer(scene, joints, None)
    independent = all(np.array_equal(base.forward_infer(scene, joints, vv[None].astype(np.float32)), ref)
                      for vv in np.random.default_rng(9).standard_normal((10, 2)) * 2)
    ok = worst <= 1e-7 and independent
    criterion(6, ok, f"vector at t >= 10 vs mean of first 10: max dev {worst:.1e} (<= 1e-7); "
                     f"baseline identical over 10 random vectors: {independent}")
    assert ok


# ---------------------------------------------------------------- 7. determinism and persistence

def test_determinism_and_persistence(criterion, tmp_path):
    ds = data.generate_dataset([0, 45], 1, 0.01, 0)
    _, h1 = train(TrainConfig(seed=0, max_steps=10), ds)
    _, h2 = train(TrainConfig(seed=0, max_steps=10), ds)
    loss_dev = max(abs(a[1] - b[1]) for a, b in zip(h1, h2))

    data.write_dataset(ds, tmp_path / "d")
    back = data.read_dataset(tmp_path / "d")
    ds_exact = all(a.equals(b) for a, b in zip(ds.episodes, back.episodes)) and len(back) == len(ds)
    data.write_dataset(back, tmp_path / "d2")
    files_exact = all((tmp_path / "d" / f).read_bytes() == (tmp_path / "d2" / f).read_bytes()
                      for f in os.listdir(tmp_path / "d"))

    model = ACTPolicy(ModelConfig(variant="gated"), seed=4)
    model.save(tmp_path / "m.ogck")
    loaded, _ = ACTPolicy.load(tmp_path / "m.ogck")
    ck_exact = all(loaded.store[n].data.tobytes() == p.data.tobytes() for n, p in model.store)

    replay_exact = all(data.replay_episode(ep).equals(ep) for ep in back.episodes)
    ok = loss_dev <= 1e-9 and ds_exact and files_exact and ck_exact and replay_exact
    criterion(7, ok, f"first 10 losses max dev {loss_dev:.1e} (<= 1e-9); dataset round trip {ds_exact and files_exact}; "
                     f"checkpoint round trip {ck_exact}; stored-episode replay {replay_exact}")
    assert ok


# ---------------------------------------------------------------- 8. closed forms

def test_closed_forms(criterion):
    kl = float(kl_divergence(Tensor(np.ones((1, 16))), Tensor(np.zeros((1, 16)))).data)
    gt = np.random.default_rng(0).standard_normal((2, 16, 4)).astype(np.float32)
    zero, _, _ = loss(Tensor(gt), gt, Tensor(np.zeros((2, 16))), Tensor(np.zeros((2, 16))), 10.0)
    store = tc.ParamStore()
    p = store.add("p", np.array([1.0], np.float32))
    p.grad[:] = 1.0
    tc.adam_step(store, lr=0.1)
    adam_err = abs(float(p.data[0]) - scalar_adam(1.0, [1.0], 0.1)[0])
    ok = abs(kl - 8.0) <= 1e-6 and float(zero.data) == 0.0 and adam_err <= 1e-7
    criterion(8, ok, f"KL {kl:.9f} (8 +- 1e-6); loss(pred=gt) {float(zero.data)!r}; Adam step err {adam_err:.1e} (<= 1e-7)")
    assert ok


# ---------------------------------------------------------------- 1. orientation generalisation

ANGLES = (0.0, 45.0, 22.5)


def _passes(rates):
    b, g = rates["baseline"], rates["gated"]
    return (g[0.0] >= 0.9 and g[45.0] >= 0.9 and g[22.5] - b[22.5] >= 0.3
            and b[0.0] >= 0.6 and b[45.0] >= 0.6 and b[22.5] <= 0.5)


def _run_seed(root: Path, train_set, holdout, seed: int) -> dict:
    rates = {}
    for variant in ("baseline", "gated"):
        ckpt = root / f"{variant}_s{seed}.ogck"
        log = root / f"{variant}_s{seed}.log"
        if log.exists():
            log.unlink()
        model, _ = train(TrainConfig(variant=variant, seed=seed), train_set, holdout,
                         log_path=log, ckpt_path=ckpt)
        report = ev.evaluate(model, ANGLES, 20, ev.EVAL_SEED_BASE, 0.01, train_angles=(0.0, 45.0))
        report.write(root / f"{variant}_s{seed}")
        print(report.table())
        rates[variant] = {a: report.rate(a) for a in ANGLES}
    return rates


def _fmt(rates):
    return " ".join(f"{v[:4]}[" + ",".join(f"{a:g}:{rates[v][a]:.2f}" for a in ANGLES) + "]"
                    for v in ("baseline", "gated"))


def test_orientation_generalisation(criterion, tmp_path_factory):
    root = Path(os.environ.get("OG_ACCEPT_DIR") or tmp_path_factory.mktemp("acceptance"))
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ds = data.generate_dataset([0, 45], 30, 0.01, 0)
    ds.holdout = data.choose_holdout(ds, 1, 0)
    data.write_dataset(ds, root / "data")
    train_set, holdout = data.train_holdout(ds)
    assert (len(train_set), len(holdout)) == (58, 2)

    per_seed = {0: _run_seed(root, train_set, holdout, 0)}
    ok = _passes(per_seed[0])
    detail = f"seed 0: {_fmt(per_seed[0])}"
    if not ok:
        for seed in (1, 2):
            per_seed[seed] = _run_seed(root, train_set, holdout, seed)
        median = {v: {a: float(np.median([per_seed[s][v][a] for s in per_seed])) for a in ANGLES}
                  for v in ("baseline", "gated")}
        ok = _passes(median)
        detail += "; " + "; ".join(f"seed {s}: {_fmt(per_seed[s])}" for s in (1, 2))
        detail += f"; median: {_fmt(median)}"
    elapsed = (time.perf_counter() - t0) / 60
    criterion(1, ok, f"{detail}; need gated >= 0.90 in-domain, gated-baseline >= 0.30 at 22.5, "
                     f"baseline >= 0.60 in-domain and <= 0.50 at 22.5; {elapsed:.0f} min")
    assert ok
