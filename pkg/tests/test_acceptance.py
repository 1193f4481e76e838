"""Acceptance gate: ten end-to-end criteria, one pass/fail line each."""

import json
import time

import numpy as np
import pytest

from convprompt import autodiff as ad
from convprompt import runner
from convprompt import similarity as sim
from convprompt.autodiff import Tensor
from convprompt.backbone import BackboneConfig, FrozenBackbone
from convprompt.config import ExperimentConfig
from convprompt.data import generate_stream
from convprompt.prompts import PromptConfig, PromptEngine
from convprompt.trainer import AccuracyMatrix, average_accuracy, forgetting

from conftest import FIXTURES, small_raw


def announce(capsys, num, desc, ok, extra=""):
    with capsys.disabled():
        tail = f"  [{extra}]" if extra else ""
        print(f"\ncriterion {num:2d} ({desc}): {'PASS' if ok else 'FAIL'}{tail}")
    assert ok, f"criterion {num} failed: {desc}"


@pytest.fixture(scope="module")
def small_run():
    cfg = ExperimentConfig(small_raw())
    record, trainer, matrix = runner.run(cfg)
    return cfg, record, trainer


def test_criterion_01_gradient_suite(capsys):
    start = time.time()
    report, groups = runner.gradcheck_suite()
    elapsed = time.time() - start
    covered = {"SE", "group1", "pn", "classifier"} <= set(groups)
    ok = report.passed(1e-5) and covered and elapsed < 60.0
    announce(capsys, 1, "finite-difference gradients < 1e-5", ok,
             f"max rel err {report.max_relative_error:.2e}, {elapsed:.1f}s")


def test_criterion_02_shape_suite(capsys):
    ok = True
    for l_p in (1, 4, 8):
        for k in (1, 3, 5):
            bc = BackboneConfig(image_size=32, patch_size=8, channels=1, d=32,
                                heads=4, layers=2, ffn_hidden=16, seed=0)
            engine = PromptEngine(bc, PromptConfig(
                l_p=l_p, k=k, prompted_layers=(0,), j_max=2, seed=1))
            engine.begin_task(1, 2)
            se_shape = (l_p + k - 1, bc.d_h + k - 1)
            ok &= all(se.shape == se_shape for se in engine.shared.values())
            comps = engine.generate_components(0)
            ok &= all(c.shape == (l_p, bc.d_h)
                      for cs in comps.values() for c in cs)
            prefix = engine.assemble_prompts(0, Tensor(np.ones((1, 2))))
            ok &= all(p.shape == (l_p, bc.d_h)
                      for p in prefix.key_prefixes + prefix.value_prefixes)

            seen = []
            original = ad.softmax

            def recording(x, axis=-1, _seen=seen, _orig=original):
                _seen.append(x.shape)
                return _orig(x, axis=axis)

            ad.softmax = recording
            try:
                backbone = FrozenBackbone(bc)
                with ad.no_grad():
                    backbone.forward(np.zeros((1, 32, 32)),
                                     engine.make_provider())
            finally:
                ad.softmax = original
            n = bc.num_patches + 1
            prompted = [s for s in seen if s == (n, l_p + n)]
            plain = [s for s in seen if s == (n, n)]
            ok &= len(prompted) == bc.heads
            ok &= len(plain) == bc.heads * (bc.layers - 1)
    announce(capsys, 2, "shape grid over l_p x k incl. attention length", ok)


def test_criterion_03_oracle_equivalence(capsys):
    rng = np.random.default_rng(7)
    ok = True

    for _ in range(50):  # conv2d_valid vs quadruple loop
        a, b = rng.integers(2, 7, size=2)
        kh, kw = rng.integers(1, a + 1), rng.integers(1, b + 1)
        inp, kern = rng.normal(size=(a, b)), rng.normal(size=(kh, kw))
        want = np.zeros((a - kh + 1, b - kw + 1))
        for i in range(want.shape[0]):
            for j in range(want.shape[1]):
                want[i, j] = np.sum(inp[i:i + kh, j:j + kw] * kern)
        ok &= np.max(np.abs(ad.conv2d_valid(Tensor(inp), Tensor(kern)).data
                            - want)) < 1e-10

    bc = BackboneConfig(image_size=16, patch_size=8, channels=1, d=8, heads=2,
                        layers=2, ffn_hidden=8, seed=0)
    for i in range(50):  # cosine weighting and assembly vs loop oracles
        engine = PromptEngine(bc, PromptConfig(l_p=2, k=2, prompted_layers=(0,),
                                               j_max=3, seed=i))
        engine.begin_task(1, 2)
        engine.begin_task(2, 1)
        cls = rng.normal(size=bc.d)
        got_w = engine.compute_weights(Tensor(cls), 0).data.ravel()
        q = np.maximum(cls @ engine.pn["w1"].data + engine.pn["b1"].data, 0.0)
        q = q @ engine.pn["w2"].data + engine.pn["b2"].data
        keys = [k.data for g in engine.groups for k in g.keys[0]]
        want_w = [float(q @ k / (np.linalg.norm(q) * np.linalg.norm(k)))
                  for k in keys]
        ok &= np.max(np.abs(got_w - want_w)) < 1e-10

        s = rng.normal(size=(1, 3))
        prefix = engine.assemble_prompts(0, Tensor(s))
        comps = engine.generate_components(0)
        for h in range(bc.heads):
            for kv, side in (("K", prefix.key_prefixes),
                             ("V", prefix.value_prefixes)):
                want = sum(s[0, m] * comps[(h, kv)][m].data for m in range(3))
                ok &= np.max(np.abs(side[h].data - want)) < 1e-10

    def unit(v):
        return v / np.linalg.norm(v)

    for _ in range(50):  # task_similarity vs loop oracle
        cur = [unit(rng.normal(size=6)) for _ in range(rng.integers(1, 5))]
        old = [unit(rng.normal(size=6)) for _ in range(rng.integers(1, 6))]
        pool = sim.AttributePool()
        pool.add([sim.AttributeRecord(1, "c", "a", v) for v in old])
        got = sim.task_similarity(2, [sim.AttributeRecord(2, "c", "a", v)
                                      for v in cur], pool)
        want = min(max(np.mean([max(float(c @ o) for o in old)
                                for c in cur]), 0.0), 1.0)
        ok &= abs(got - want) < 1e-10

    for _ in range(50):  # image_task_similarity vs loop oracle
        cur = [rng.normal(size=5) * rng.uniform(0.2, 2) for _ in range(2)]
        old = [rng.normal(size=5) * rng.uniform(0.2, 2) for _ in range(3)]
        got = sim.image_task_similarity(2, cur, old)
        want = min(max(np.mean([max(float(unit(c) @ unit(o)) for o in old)
                                for c in cur]), 0.0), 1.0)
        ok &= abs(got - want) < 1e-10

    announce(capsys, 3, "brute-force oracle equivalence to 1e-10", ok)


def test_criterion_04_freezing_invariant(capsys):
    cfg = ExperimentConfig(small_raw())
    stream = generate_stream(cfg.stream)
    trainer = runner.build_trainer(cfg)
    trainer.train_task(stream.tasks[0])
    backbone_sum = trainer.backbone.checksum()
    group1_sum = trainer.engine.groups[0].checksum()

    snap = trainer.engine.snapshot_shared()
    reg_at_snapshot = trainer.engine.regularization_loss(snap).item()

    provider = trainer.engine.make_provider()
    total, ce, _ = trainer.batch_loss(stream.tasks[0].train_x[:4],
                                      stream.tasks[0].train_y[:4],
                                      provider, snap, t=1)
    indicator_ok = total.item() == ce.item()

    trainer.train_task(stream.tasks[1])
    ok = (trainer.backbone.checksum() == backbone_sum
          and trainer.engine.groups[0].checksum() == group1_sum
          and reg_at_snapshot == 0.0 and indicator_ok)
    announce(capsys, 4, "backbone/old groups frozen, reg indicator", ok)


def test_criterion_05_budgeting(capsys):
    ok = sim.num_generators(sim.NO_HISTORY, 3) == 3
    ok &= sim.num_generators(0.0, 5) == 5
    ok &= sim.num_generators(0.70, 5) == 2
    for j_max in (1, 3, 5, 8):
        values = [sim.num_generators(s, j_max)
                  for s in np.linspace(0.0, 1.0, 101)]
        ok &= all(1 <= v <= j_max for v in values)
        ok &= all(a >= b for a, b in zip(values, values[1:]))
    announce(capsys, 5, "generator budgeting bounds and monotonicity", ok)


def test_criterion_06_directional_continual_result(capsys):
    start = time.time()
    base = ExperimentConfig()
    stats = {"convprompt": [], "seq_ft": []}
    for seed in (100, 200, 300):
        for mode in stats:
            cfg = base.with_overrides(
                train={"baseline_mode": mode}).with_seed(seed)
            record, _, _ = runner.run(cfg)
            stats[mode].append((record["A_T"], record["F_T"]))
    a_conv = np.mean([a for a, _ in stats["convprompt"]])
    a_seq = np.mean([a for a, _ in stats["seq_ft"]])
    f_conv = np.mean([f for _, f in stats["convprompt"]])
    f_seq = np.mean([f for _, f in stats["seq_ft"]])
    elapsed = time.time() - start
    ok = (a_conv - a_seq >= 0.10) and (f_conv < f_seq) and elapsed < 600
    announce(capsys, 6, "convprompt beats seq_ft by >= 10 points, lower F_T", ok,
             f"A_T {a_conv:.3f} vs {a_seq:.3f}, F_T {f_conv:.3f} vs {f_seq:.3f}, "
             f"{elapsed:.0f}s")


def test_criterion_07_single_pass_inference(capsys, small_run):
    _, record, _ = small_run
    ok = record["forward_passes_per_inference"] == 1
    announce(capsys, 7, "one forward pass per inference", ok)


def test_criterion_08_parameter_accounting(capsys, small_run, monkeypatch):
    ok = True
    hand_counted = [
        # (d, heads, prompted layers, l_p, k, j) -> SE count by hand
        (32, 4, 3, 4, 3, 2, 1440),   # 3*4*2*(4+2)*(8+2)
        (8, 2, 1, 2, 2, 1, 60),      # 1*2*2*(2+1)*(4+1)
        (16, 4, 2, 3, 3, 2, 480),    # 2*4*2*(3+2)*(4+2)
    ]
    for d, heads, n_layers, l_p, k, j, se_want in hand_counted:
        bc = BackboneConfig(image_size=32, patch_size=8, channels=1, d=d,
                            heads=heads, layers=4, ffn_hidden=8, seed=0)
        engine = PromptEngine(bc, PromptConfig(
            l_p=l_p, k=k, prompted_layers=tuple(range(n_layers)), j_max=3,
            seed=0))
        engine.begin_task(1, j)
        closed = engine.closed_form_counts()
        ok &= closed["se"] == se_want
        live_se = sum(t.size for t in engine.shared.values())
        live_pn = sum(t.size for t in engine.pn.values())
        live_group = sum(t.size for _, t in engine.groups[0].tensors())
        ok &= (closed["se"], closed["pn"], closed["per_task"][1]) == (
            live_se, live_pn, live_group)
        trainable, frozen, _ = engine.trainable_parameter_count()
        ok &= trainable == live_se + live_pn + live_group and frozen == 0

    cfg, record, _ = small_run
    monkeypatch.setattr(sim, "num_generators",
                        lambda s, j_max: j_max)
    forced, _, _ = runner.run(cfg)
    ok &= record["trainable_params_final"] <= forced["trainable_params_final"]
    ok &= all(b["trainable_params"] <= f["trainable_params"] for b, f in
              zip(record["per_task"], forced["per_task"]))
    announce(capsys, 8, "closed-form counts, budgeted <= forced", ok,
             f"budgeted {record['trainable_params_final']} <= "
             f"forced {forced['trainable_params_final']}")


def test_criterion_09_metrics_and_appendix_similarities(capsys):
    m = AccuracyMatrix(2)
    m.set(1, 1, 0.9)
    m.set(1, 2, 0.8)
    m.set(2, 2, 0.7)
    ok = abs(average_accuracy(m, 2) - 0.75) < 1e-12
    ok &= abs(forgetting(m, 2) - 0.1) < 1e-12
    up = AccuracyMatrix(2)
    up.set(1, 1, 0.7)
    up.set(1, 2, 0.9)
    up.set(2, 2, 0.9)
    ok &= abs(forgetting(up, 2) - (-0.2)) < 1e-12
    flat = AccuracyMatrix(2)
    for t, u, v in ((1, 1, 0.8), (1, 2, 0.8), (2, 2, 0.8)):
        flat.set(t, u, v)
    ok &= abs(average_accuracy(flat, 2) - 0.8) < 1e-12
    ok &= forgetting(flat, 2) == 0.0

    for name, target in (("similar_tasks.json", 0.86),
                         ("dissimilar_tasks.json", 0.70)):
        tasks, _ = sim.load_attribute_file(f"{FIXTURES}/{name}")
        pool = sim.AttributePool()
        value = None
        for task_id, records in tasks:
            value = sim.task_similarity(task_id, records, pool)
            pool.add(records)
        ok &= value == target
    announce(capsys, 9, "metric hand values and appendix similarities", ok)


def test_criterion_10_reproducibility(capsys, small_run):
    cfg, record, _ = small_run
    again, _, _ = runner.run(cfg)
    ok = json.dumps(record, sort_keys=True) == json.dumps(again, sort_keys=True)
    announce(capsys, 10, "bitwise-identical records for identical config/seed", ok)
