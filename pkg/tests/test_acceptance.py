"""Acceptance suite: one test per criterion, each recording a PASS/FAIL summary line."""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from moecgan import nn
from moecgan.config import RunConfig, profile
from moecgan.conv import conv3d, conv_transpose3d
from moecgan.dcc import DccConfig, DccState
from moecgan.experiment import ablation, build_model, build_trainer, evaluate_completion, train_run
from moecgan.gan import ArchConfig, MoECGAN, Trainer, TrainSettings, geometric_consistency_loss, infer
from moecgan.gating import GatingNetwork, route_with_capacity, simulate_routing
from moecgan.mesh import edge_valence, euler_characteristic, marching_cubes, read_obj, surface_area, write_obj
from moecgan.metrics import chamfer, emd, emd_bruteforce, hausdorff, summarize
from moecgan.tensor import (
    Tensor,
    broadcast_to,
    check_gradients,
    clip,
    concat,
    elementwise,
    getitem,
    leaky_relu,
    matmul,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    softmax_temperature,
    transpose,
)
from moecgan.train import load_trainer, save_trainer, synthesize_dataset
from moecgan.voxel import FAMILIES, VoxelGrid, random_shape_spec, read_vox, synthesize_shape, write_vox

TITLES = {
    1: "gradient correctness",
    2: "routing and capacity exactness",
    3: "load balance on skewed workload",
    4: "EMD oracle and CD/HD identities",
    5: "geometric loss locality",
    6: "sparse-activation counters",
    7: "desk-scale end-to-end run",
    8: "expert-count ablation report",
    9: "marching cubes",
    10: "persistence",
}


class _Note:
    detail = ""


@contextmanager
def criterion(config, n: int):
    note = _Note()
    try:
        yield note
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        config.acceptance[n] = f"criterion {n:2d} FAIL  {TITLES[n]}: {msg[:160]}"
        raise
    config.acceptance[n] = f"criterion {n:2d} PASS  {TITLES[n]}" + (f": {note.detail}" if note.detail else "")


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def away_from_kinks(rng, shape, lo=0.2, hi=2.0):
    """Random values with magnitude in [lo, hi], also kept 0.05 away from +-1."""
    x = rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)
    near = np.abs(np.abs(x) - 1.0) < 0.05
    x[near] += 0.1 * np.sign(x[near])
    return x


# -- 1 ------------------------------------------------------------------------------

def _primitive_cases():
    pos = lambda r, s: r.uniform(0.5, 2.0, s)
    anyv = lambda r, s: away_from_kinks(r, s)
    unary = {k: (lambda k: lambda a: elementwise(k, a).sum())(k) for k in
             ["neg", "relu", "sigmoid", "tanh", "exp", "square", "abs", "gelu"]}
    cases = [(f"elementwise:{k}", [anyv], f) for k, f in unary.items()]
    cases += [
        ("elementwise:log", [pos], lambda a: elementwise("log", a).sum()),
        ("elementwise:sqrt", [pos], lambda a: elementwise("sqrt", a).sum()),
        ("elementwise:add", [anyv, anyv], lambda a, b: (elementwise("add", a, b) * a).sum()),
        ("elementwise:sub", [anyv, anyv], lambda a, b: (elementwise("sub", a, b) * a).sum()),
        ("elementwise:mul", [anyv, anyv], lambda a, b: elementwise("mul", a, b).sum()),
        ("elementwise:div", [anyv, pos], lambda a, b: elementwise("div", a, b).sum()),
        ("leaky_relu", [anyv], lambda a: leaky_relu(a, 0.2).sum()),
        ("power", [pos], lambda a: power(a, 2.5).sum()),
        ("clip", [anyv], lambda a: clip(a, -1.0, 1.0).square().sum()),
        ("softmax_temperature", [anyv, anyv], lambda a, w: (softmax_temperature(a, 0.7) * w).sum()),
        ("reduce_sum", [anyv], lambda a: reduce_sum(a, axis=1).square().sum()),
        ("reduce_mean", [anyv], lambda a: reduce_mean(a, axis=0).square().sum()),
        ("reshape", [anyv], lambda a: (reshape(a, (-1,)) * Tensor(np.arange(a.size, dtype=float))).sum()),
        ("transpose", [anyv], lambda a: (transpose(a, (1, 0)) * Tensor(np.arange(a.size, dtype=float).reshape(a.shape[::-1]))).sum()),
        ("getitem", [anyv], lambda a: getitem(a, (slice(0, 2), 1)).square().sum()),
        ("concat", [anyv, anyv], lambda a, b: concat([a, b], 0).square().sum()),
        ("broadcast_to", [anyv], lambda a: (broadcast_to(reshape(a, (1,) + a.shape), (2,) + a.shape).square()).sum()),
    ]
    return cases


def _layer_worst(layer, x_shape, rng, n_instances=20, coords=10):
    worst = 0.0
    params = layer.parameters()
    for _ in range(n_instances):
        x = leaf(rng.standard_normal(x_shape))
        w = Tensor(rng.standard_normal(layer(x).shape))
        fn = lambda x, *ps: (layer(x) * w).sum()
        worst = max(worst, check_gradients(fn, [x, *params], max_coords=coords, rng=rng))
    return worst


def test_criterion_01_gradients(pytestconfig):
    with criterion(pytestconfig, 1) as note:
        rng = np.random.default_rng(1)
        t0 = time.perf_counter()
        worst = {}
        for name, gens, fn in _primitive_cases():
            w = 0.0
            for _ in range(20):
                w = max(w, check_gradients(fn, [leaf(g(rng, (3, 4))) for g in gens], rng=rng))
            worst[name] = w
        worst["matmul"] = max(
            check_gradients(lambda a, b: matmul(a, b).square().sum(),
                            [leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))], rng=rng)
            for _ in range(20)
        )
        for name, op, wshape, kw in [
            ("conv3d", conv3d, (3, 2, 3, 3, 3), dict(stride=2, padding=1, dilation=1)),
            ("conv_transpose3d", conv_transpose3d, (2, 3, 4, 4, 4), dict(stride=2, padding=1)),
        ]:
            w = 0.0
            for _ in range(20):
                x, k, b = leaf(rng.standard_normal((1, 2, 4, 4, 4))), leaf(rng.standard_normal(wshape)), leaf(rng.standard_normal(wshape[1] if op is conv_transpose3d else wshape[0]))
                probe = Tensor(rng.standard_normal(op(x, k, b, **kw).shape))
                w = max(w, check_gradients(lambda x, k, b: (op(x, k, b, **kw) * probe).sum(), [x, k, b], max_coords=10, rng=rng))
            worst[name] = w

        bn = nn.BatchNorm3d(2)
        bn.weight.data = rng.standard_normal(2)
        sn = nn.SpectralNorm(nn.Conv3d(2, 3, 3, 1, 1, rng=rng), rng=rng)
        sn.power_iteration(5)
        sn.eval()
        layers = [
            ("conv3d k4s2", nn.Conv3d(2, 3, 4, 2, 1, rng=rng), (2, 2, 6, 6, 6)),
            ("dilated r2", nn.Conv3d(2, 2, 3, 1, 2, dilation=2, rng=rng), (1, 2, 6, 6, 6)),
            ("dilated r4", nn.Conv3d(2, 2, 3, 1, 4, dilation=4, rng=rng), (1, 2, 6, 6, 6)),
            ("dilated r8", nn.Conv3d(2, 2, 3, 1, 8, dilation=8, rng=rng), (1, 2, 6, 6, 6)),
            ("transposed k4s2", nn.ConvTranspose3d(2, 3, 4, 2, 1, rng=rng), (2, 2, 3, 3, 3)),
            ("batchnorm", bn, (2, 2, 3, 3, 3)),
            ("instancenorm", nn.InstanceNorm3d(3), (2, 3, 3, 3, 3)),
            ("spectral-norm conv", sn, (1, 2, 4, 4, 4)),
            ("gelu", nn.GELU(), (2, 2, 3, 3, 3)),
            ("leaky relu", nn.LeakyReLU(0.2), (2, 2, 3, 3, 3)),
            ("sigmoid", nn.Sigmoid(), (2, 2, 3, 3, 3)),
        ]
        for name, layer, shape in layers:
            worst[name] = _layer_worst(layer, shape, rng)

        gn = GatingNetwork(5, 3, 4, 3, hidden=(8, 6), rng=rng)
        w = 0.0
        for _ in range(20):
            z = leaf(rng.standard_normal((2, 5)))
            feats = [leaf(rng.standard_normal((2, 4))) for _ in range(3)]
            xp = rng.random((2, 1, 3, 3, 3))
            probe = Tensor(rng.standard_normal((2, 3)))
            fn = lambda z, f0, f1, f2, *ps: (gn(z, xp, [f0, f1, f2]) * probe).sum()
            w = max(w, check_gradients(fn, [z, *feats, *gn.parameters()], max_coords=10, rng=rng))
        worst["gating MLP"] = w

        elapsed = time.perf_counter() - t0
        bad = {k: v for k, v in worst.items() if not v < 1e-4}
        assert not bad, f"rel-err >= 1e-4: {bad}"
        assert elapsed < 120, f"took {elapsed:.0f}s"
        note.detail = f"{len(worst)} ops x 20 instances, worst rel-err {max(worst.values()):.1e}, {elapsed:.0f}s"


# -- 2 ------------------------------------------------------------------------------

def _state(caps):
    s = DccState.initial(DccConfig(n_experts=len(caps), batch_size=8))
    s.capacities = np.asarray(caps, dtype=np.float64)
    return s


def test_criterion_02_routing_exact(pytestconfig):
    with criterion(pytestconfig, 2) as note:
        d = route_with_capacity([[0, 1]] * 3, _state([1, 1]))
        assert [r.expert for r in d] == [0, 1, 0]
        assert [r.overflow for r in d] == [False, False, True]
        s = _state([10, 10, 10])
        assert [r.expert for r in route_with_capacity([[2, 0], [1, 2], [0, 1], [2, 1]], s)] == [2, 1, 0, 2]
        assert s.overflow == 0
        s = _state([2, 2])
        route_with_capacity([[0, 1]] * 4, s)
        assert s.loads.tolist() == [2, 2]
        d = route_with_capacity([[0]] * 2, _state([1, 4, 2]))
        assert [r.expert for r in d] == [0, 1] and d[1].overflow

        cfg = DccConfig(n_experts=8, batch_size=64, capacity_factor=1.2, momentum=0.95, alpha=0.1, update_period=5)
        assert abs(cfg.base_capacity - 64 / 8 * 1.2) < 1e-12
        got = []
        for u, expected in [(1 / 8, 9.6), (0.25, 9.48), (0.0, 9.72)]:
            st_ = DccState.initial(cfg)
            st_.u_avg = np.full(8, u)
            cap = st_.update_capacities(cfg)[0]
            assert abs(cap - expected) < 1e-12, (u, cap)
            got.append(cap)
        note.detail = "traces exact; capacities " + "/".join(f"{c:.2f}" for c in got)


# -- 3 ------------------------------------------------------------------------------

def test_criterion_03_load_balance(pytestconfig):
    with criterion(pytestconfig, 3) as note:
        cfg = DccConfig(n_experts=8, batch_size=64, capacity_factor=1.2, momentum=0.95, alpha=0.1, update_period=5)
        t0 = time.perf_counter()
        on = simulate_routing(cfg, n_batches=500, favourite=0.6, constrained=True, seed=0)
        off = simulate_routing(cfg, n_batches=500, favourite=0.6, constrained=False, seed=0)
        elapsed = time.perf_counter() - t0
        ratio = on.u_avg.std() / off.u_avg.std()
        assert ratio <= 0.5, ratio
        for s in (on, off):
            assert abs(s.u_avg.mean() - 1 / 8) <= 0.01, s.u_avg.mean()
        assert elapsed < 60
        note.detail = (f"std with/without {on.u_avg.std():.4f}/{off.u_avg.std():.4f} (ratio {ratio:.3f}), "
                       f"means {on.u_avg.mean():.4f}/{off.u_avg.mean():.4f}")


# -- 4 ------------------------------------------------------------------------------

def test_criterion_04_metric_oracles(pytestconfig):
    with criterion(pytestconfig, 4) as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(200):
            m = int(rng.integers(1, 7))
            A, B = rng.standard_normal((m, 3)), rng.standard_normal((m, 3))
            worst = max(worst, abs(emd(A, B) - emd_bruteforce(A, B)))
        assert worst <= 1e-9, worst
        A, B = rng.random((40, 3)), rng.random((25, 3))
        assert chamfer(A, A) == 0.0 and hausdorff(A, A) == 0.0
        assert chamfer(A, B) == chamfer(B, A) and hausdorff(A, B) == hausdorff(B, A)
        o, x = np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])
        assert chamfer(o, x) == 2.0 and hausdorff(o, x) == 1.0
        assert emd(np.array([[0.0, 0, 0], [2.0, 0, 0]]), np.array([[1.0, 0, 0], [3.0, 0, 0]])) == 1.0
        elapsed = time.perf_counter() - t0
        assert elapsed < 60
        note.detail = f"200 instances, worst |exact - brute| {worst:.1e}, {elapsed:.1f}s"


# -- 5 ------------------------------------------------------------------------------

def test_criterion_05_geometric_locality(pytestconfig):
    with criterion(pytestconfig, 5) as note:
        rng = np.random.default_rng(5)
        for i in range(100):
            shape = (int(rng.integers(1, 3)),) + (int(rng.integers(2, 6)),) * 3
            x, xt = rng.random(shape), rng.random(shape)
            mask = (rng.random(shape) > rng.uniform(0.1, 0.9)).astype(float)
            lam = float(rng.uniform(0.1, 20))
            red = ("sum", "mean", "observed")[i % 3]
            base = float(geometric_consistency_loss(x, xt, mask, lam, red).data)
            wild = xt + (1 - mask) * rng.standard_normal(shape) * 1e3
            assert float(geometric_consistency_loss(x, wild, mask, lam, red).data) == base
            t = Tensor(xt, requires_grad=True)
            geometric_consistency_loss(x, t, mask, lam, red).backward()
            assert np.all(t.grad[mask == 0] == 0)
        note.detail = "100 triples, value unchanged and gradient exactly zero off the mask"


# -- 6 ------------------------------------------------------------------------------

TINY = ArchConfig(resolution=8, latent_dim=6, latent_channels=2, width=1.0,
                  down_channels=(3, 4, 5), dilated_channels=5, dilation_rates=(2,), disc_channels=(3, 4, 4))


def _tiny_shapes(B, seed):
    out = [synthesize_shape(random_shape_spec(FAMILIES[i % 5], np.random.default_rng([seed, i]), i), 8).values for i in range(B)]
    return np.stack(out).astype(np.float64)[:, None]


def test_criterion_06_sparse_activation(pytestconfig):
    with criterion(pytestconfig, 6) as note:
        n, k, B = 4, 2, 4
        model = MoECGAN(TINY, n, gating_hidden=(8, 6), seed=0)
        tr = Trainer(model, DccConfig(n_experts=n, batch_size=B), TrainSettings(k=k), seed=0)
        soft_max = 0
        for b in range(10):
            rep = tr.train_step(_tiny_shapes(B, b))
            assert rep.hard_forwards == [1] * B, rep.hard_forwards
            assert all(1 <= s <= k for s in rep.soft_forwards), rep.soft_forwards
            soft_max = max(soft_max, max(rep.soft_forwards))
        c = tr.counters
        assert c["samples"] == 10 * B and c["hard_forwards"] == c["samples"]
        assert c["soft_forwards"] <= k * c["samples"]
        counter = {}
        infer(model, np.random.default_rng(0).standard_normal((5, 6)), _tiny_shapes(5, 99), tau=0.5, k=k, counter=counter)
        assert counter["soft_forwards"] <= k * 5
        note.detail = (f"10 batches x {B}: hard forwards {c['hard_forwards']}/{c['samples']} samples, "
                       f"soft forwards {c['soft_forwards']} (max {soft_max}/sample, k={k})")


# -- 7 ------------------------------------------------------------------------------

def inversions(values) -> int:
    return int(sum(b < a for a, b in zip(values, values[1:])))


@pytest.fixture(scope="module")
def desk_run():
    cfg = profile("desk")
    cfg.validate()
    t0 = time.perf_counter()
    data = synthesize_dataset(cfg.data.n_shapes, cfg.data.resolution, cfg.data.seed, tuple(cfg.data.families))
    test = [data.grids[i] for i in data.test_idx]
    untrained = summarize(evaluate_completion(build_model(cfg), cfg, test))
    res = train_run(cfg, data)
    trained = summarize(evaluate_completion(res.trainer.model, cfg, test))
    ratios = [round(0.1 * i, 1) for i in range(1, 10)]
    sweep = [summarize(evaluate_completion(res.trainer.model, cfg, test, r)) for r in ratios]
    return dict(cfg=cfg, res=res, untrained=untrained, trained=trained, sweep=sweep,
                elapsed=time.perf_counter() - t0)


@pytest.mark.slow
def test_criterion_07_desk_end_to_end(pytestconfig, desk_run):
    with criterion(pytestconfig, 7) as note:
        cfg, res = desk_run["cfg"], desk_run["res"]
        assert (cfg.data.resolution, cfg.model.n_experts, cfg.data.n_shapes, cfg.train.epochs) == (16, 4, 200, 30)
        losses = np.array([r.losses() for r in res.reports])
        assert len(losses) > 0 and np.all(np.isfinite(losses)) and not res.nonfinite
        mon = res.trainer.monitor
        assert not mon.starved, mon.snapshot()
        tr, un = desk_run["trained"], desk_run["untrained"]
        assert tr["prr"] >= 80, tr
        assert tr["cd"] * 3 <= un["cd"], (tr["cd"], un["cd"])
        sweep = desk_run["sweep"]
        inv = {m: inversions([row[m] for row in sweep]) for m in ("cd", "hd", "emd")}
        assert all(v <= 1 for v in inv.values()), (inv, sweep)
        assert desk_run["elapsed"] <= 1200, desk_run["elapsed"]
        print("\nocclusion sweep (10..90%):")
        for r, row in zip(range(10, 100, 10), sweep):
            print(f"  {r}%  cd={row['cd']:.5f} hd={row['hd']:.4f} emd={row['emd']:.4f} prr={row['prr']:.1f}")
        note.detail = (f"PRR {tr['prr']:.1f}, CD {tr['cd']:.4f} vs untrained {un['cd']:.4f} "
                       f"({un['cd'] / tr['cd']:.1f}x), inversions {inv}, worst starvation streak "
                       f"{int(mon.worst.max())}/{mon.patience}, {desk_run['elapsed']:.0f}s")


# -- 8 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_ablation_report(pytestconfig, tmp_path):
    with criterion(pytestconfig, 8) as note:
        base = profile("desk")
        base.set("train.epochs", 3)
        base.validate()
        t0 = time.perf_counter()
        rows, report = ablation(base, (1, 4, 8), out_dir=tmp_path)
        assert [r["label"] for r in rows] == ["n=1", "n=4", "n=8"]
        for r in rows:
            assert all(np.isfinite(r[m]) for m in ("cd", "hd", "emd", "prr")) and not r["nonfinite"]
        assert "Desk-scale" in report
        for label in ("n=1", "n=4", "n=8"):
            assert f"| {label} |" in report
        assert (tmp_path / "ablation.md").read_text() == report
        note.detail = f"n=1/4/8 at 3 epochs each, CD " + "/".join(f"{r['cd']:.4f}" for r in rows) + f", {time.perf_counter() - t0:.0f}s"


# -- 9 ------------------------------------------------------------------------------

def test_criterion_09_marching_cubes(pytestconfig, tmp_path):
    with criterion(pytestconfig, 9) as note:
        x = np.zeros((5, 5, 5))
        x[2, 2, 2] = 1.0
        cell = marching_cubes(x)
        assert euler_characteristic(cell) == 2 and np.all(edge_valence(cell) == 2)

        R, r = 16, 6.0
        c = np.indices((R,) * 3) + 0.5
        ball = (np.sqrt(((c - R / 2) ** 2).sum(0)) <= r).astype(float)
        err = abs(surface_area(marching_cubes(ball)) / (4 * np.pi * (r / R) ** 2) - 1)
        assert err < 0.10, err

        for i in range(50):
            g = synthesize_shape(random_shape_spec(FAMILIES[i % 5], np.random.default_rng([9, i]), i), 16)
            assert np.all(edge_valence(marching_cubes(g)) == 2), i

        m = marching_cubes(synthesize_shape(random_shape_spec("cross", np.random.default_rng(9), 1), 16))
        write_obj(m, tmp_path / "m.obj")
        back = read_obj(tmp_path / "m.obj")
        dev = float(np.max(np.abs(back.vertices - m.vertices)))
        assert np.array_equal(back.triangles, m.triangles) and dev < 1e-5
        note.detail = f"chi=2, binary sphere area error {err:.1%}, 50 primitives watertight, OBJ max dev {dev:.1e}"


# -- 10 -----------------------------------------------------------------------------

def test_criterion_10_persistence(pytestconfig, tmp_path):
    with criterion(pytestconfig, 10) as note:
        cfg = RunConfig()
        for o in ["data.n_shapes=20", "data.resolution=8", "model.width=0.0625", "model.latent_dim=8",
                  "model.n_experts=3", "model.gating_hidden=[8,6]", "train.batch_size=4", "train.precision=float64"]:
            cfg.override(o)
        cfg.validate()
        data = synthesize_dataset(cfg.data.n_shapes, cfg.data.resolution, cfg.data.seed)
        ref = build_trainer(cfg)
        train_run(cfg, data, trainer=ref, max_iterations=3)
        save_trainer(ref, tmp_path / "c.mckp", cfg.to_dict())
        expected = [r.losses() for r in train_run(cfg, data, trainer=ref, max_iterations=8).reports]
        fresh = build_trainer(cfg)
        load_trainer(fresh, tmp_path / "c.mckp")
        got = [r.losses() for r in train_run(cfg, data, trainer=fresh, max_iterations=8).reports]
        assert len(expected) == 5 and got == expected

        rng = np.random.default_rng(10)
        binary = VoxelGrid((rng.random((16, 16, 16)) > 0.6).astype(np.uint8))
        real = VoxelGrid(rng.random((8, 8, 8)).astype(np.float32))  # real payload is float32
        for i, g in enumerate((binary, real)):
            write_vox(g, tmp_path / f"g{i}.vox")
            back = read_vox(tmp_path / f"g{i}.vox")
            assert np.array_equal(back.values, g.values) and back.values.dtype == g.values.dtype
        note.detail = "5 resumed losses bit-identical at float64; VOX binary and real grids bit-exact"
