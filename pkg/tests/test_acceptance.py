"""End-to-end acceptance checks on the desk profile.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line
per criterion at the end of the session. Trained models are shared through
module fixtures, and each fixture keeps its own CPU time so the budgets can be
checked against the work that actually belongs to a criterion.
"""

import itertools
import time

import numpy as np
import pytest

from latcanon.analysis import PROBE_ORDER, bypass_pc_control, pca_delta, probe_all, spearman
from latcanon.autodiff import Adam, KinkMonitor, grad_check
from latcanon.canonlearn import (TrainMode, apply_path, make_batch, pretrain, refine_fewshot,
                                 single_path_accuracy, total_loss, vote_accuracy)
from latcanon.cli import main
from latcanon.network import ArchConfig, build_model, decode, encode, load_checkpoint, save_checkpoint
from latcanon.simgen import (DEFAULT_SHIFT, DspriteDataset, FactorRanges, SceneDataset, generate_dataset,
                             shifted_domain)
from test_autodiff import CASES

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
REFINE_SEEDS = (0, 1, 2, 3, 4)
SHOTS = (10, 20)
EPOCHS = 20
LR = 3e-3
REFINE_LR = 1e-4
BATCH = 16


def cpu():
    return time.process_time()


def note(record_property, text):
    record_property("detail", text)


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient oracle")
def test_gradient_oracle(record_property):
    t0 = cpu()
    worst = 0.0
    for name, (fn, make) in CASES.items():
        for seed in SEEDS:
            rep = grad_check(fn, make(seed), op_name=name)
            assert rep.max_rel_err < 1e-3, rep
            worst = max(worst, rep.max_rel_err)

    # the whole training objective, with a two-canonicalizer composition in both orders
    ds = SceneDataset.sample(FactorRanges.desk(), 2, seed=0, size=16)
    batch = make_batch(ds, [0, 1])
    shared = ["encoder.b0.c0.w", "encoder.b1.c2.gamma", "decoder.t0.w", "decoder.t3.b", "classifier.w"]
    skipped = checked = 0
    for seed in SEEDS:
        m = build_model(ArchConfig.desk(), seed)
        h, j = (1, 4) if seed != 1 else (4, 2)
        paths = (h, j, [(h,), (j,), (h, j), (j, h)])
        names = shared + [f"canon.{h}", f"canon.{j}"]
        base = {k: m.params[k].data.astype(np.float64) for k in names}

        def fn(**kw):
            m.params.update(kw)
            return total_loss(m, batch, TrainMode("latent_canon"), seed=seed, step=0, paths_override=paths)[0]

        with KinkMonitor() as mon:
            rep = grad_check(fn, base, op_name="total_loss", monitor=mon, max_coords=24, seed=seed)
        assert rep.max_rel_err < 1e-3, rep
        assert rep.n_checked > rep.n_skipped
        worst = max(worst, rep.max_rel_err)
        skipped += rep.n_skipped
        checked += rep.n_checked
    elapsed = cpu() - t0
    note(record_property, f"max rel err {worst:.1e}, composite {checked} coords checked, {skipped} on kinks, "
                          f"{elapsed:.0f}s")
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. combination space
# ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "combination-space math")
def test_combination_space(capsys, record_property):
    assert main(["space", "--bins", "30,64,64,6,6,10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "44236800"
    assert "0.001695" in lines[1] and "0.17%" in lines[1]
    assert 75000 / 44236800 == pytest.approx(0.001695, abs=5e-7)
    note(record_property, lines[1].strip())


# ---------------------------------------------------------------------------
# 3. determinism
# ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "determinism")
def test_determinism(tmp_path, record_property):
    t0 = cpu()
    for name, n, ranges, size in [("paper", 75000, FactorRanges(), 32), ("desk", 5000, FactorRanges.desk(), 16)]:
        a, b = tmp_path / f"{name}_a.lcds", tmp_path / f"{name}_b.lcds"
        generate_dataset("svhn", n, 2024, a, ranges=ranges, size=size)
        generate_dataset("svhn", n, 2024, b, ranges=ranges, size=size)
        assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "paper_a.lcds").stat().st_size > 75000 * 163

    m = build_model(ArchConfig.desk(), 5)
    opt = Adam(m.params, lr=1e-3)
    batch = make_batch(SceneDataset.sample(FactorRanges.desk(), 8, seed=1, size=16), range(8))
    loss, _ = total_loss(m, batch, TrainMode("latent_canon"))
    loss.backward()
    opt.step(skip=[k for k, p in m.params.items() if p.grad is None])
    first, second = tmp_path / "a.lcck", tmp_path / "b.lcck"
    save_checkpoint(first, m, opt.state_dict(), {"epoch": 1})
    m2, state, extra = load_checkpoint(first)
    save_checkpoint(second, m2, state, extra)
    assert first.read_bytes() == second.read_bytes()
    for k, p in m.params.items():
        assert m2.params[k].data.tobytes() == p.data.tobytes()
    elapsed = cpu() - t0
    note(record_property, f"{elapsed:.0f}s")
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 4. dSprites
# ---------------------------------------------------------------------------

def _recon_mse(m, ds, path):
    idx = np.arange(len(ds))
    z = encode(m, ds.images(idx, "noised"), "eval")
    out = decode(m, apply_path(m, z, path), "eval").data
    return float(np.mean((out - ds.targets(idx, path)) ** 2))


@pytest.mark.criterion(4, "dSprites canonicalization")
def test_dsprites_canonicalization(record_property):
    t0 = cpu()
    train = DspriteDataset.sample(2000, seed=0, size=16)
    test = DspriteDataset.sample(300, seed=1, size=16)
    cfg = ArchConfig.desk(image_channels=1, n_canon=5, n_classes=3)
    singles = [(j,) for j in range(5)]
    pairs = list(itertools.permutations(range(5), 2))
    triplet = (0, 2, 4)
    m = build_model(cfg, 0)
    untrained = {p: _recon_mse(m, test, p) for p in singles + pairs + [triplet]}
    epochs = 20
    pretrain(m, train, TrainMode("latent_canon"), epochs=epochs, seed=0, lr=LR,
                                     batch_size=BATCH)
    ratio = {p: _recon_mse(m, test, p) / untrained[p] for p in untrained}
    elapsed = cpu() - t0
    note(record_property, f"single <= {max(ratio[p] for p in singles):.3f}, "
                          f"pair <= {max(ratio[p] for p in pairs):.3f}, triplet {ratio[triplet]:.3f}, "
                          f"{epochs} epochs, {elapsed:.0f}s")
    assert all(ratio[p] <= 0.2 for p in singles), ratio
    assert all(ratio[p] <= 0.3 for p in pairs), ratio
    assert ratio[triplet] <= 0.5
    assert epochs <= 30 and elapsed < 600


# ---------------------------------------------------------------------------
# shared desk models and the few-shot sweep
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def data():
    ranges = FactorRanges.desk()
    shifted = shifted_domain(ranges, DEFAULT_SHIFT)
    return {
        "source": SceneDataset.sample(ranges, 2000, seed=1, size=16),
        "probe": SceneDataset.sample(ranges, 1000, seed=5, size=16),
        "target_train": SceneDataset.sample(shifted, 1000, seed=2, size=16),
        "target_test": SceneDataset.sample(shifted, 500, seed=3, size=16),
    }


@pytest.fixture(scope="module")
def pretrained(data, tmp_path_factory):
    """latent_canon and ae_cls desk models for three pretraining seeds, saved to disk."""
    root = tmp_path_factory.mktemp("pretrained")
    t0 = cpu()
    models, paths, logs = {}, {}, {}
    for mode in ("latent_canon", "ae_cls"):
        for s in SEEDS:
            m = build_model(ArchConfig.desk(), s)
            logs[mode, s] = pretrain(m, data["source"], TrainMode(mode), epochs=EPOCHS, seed=s, lr=LR,
                                     batch_size=BATCH)
            paths[mode, s] = root / f"{mode}{s}.lcck"
            save_checkpoint(paths[mode, s], m)
            models[mode, s] = m
    return {"models": models, "paths": paths, "logs": logs, "cpu": cpu() - t0}


@pytest.fixture(scope="module")
def sweep(data, pretrained):
    """3 pretraining seeds x 5 refinement seeds at each shot count, for every model kind."""
    t0 = cpu()
    tt, te = data["target_train"], data["target_test"]
    acc = {}
    votes = []
    drift = []
    for shots in SHOTS:
        for mode in ("latent_canon", "ae_cls", "cls_only"):
            for s in SEEDS:
                if mode == "latent_canon":
                    saved = load_checkpoint(pretrained["paths"][mode, s])[0]
                    frozen = {k: saved.params[k].data.tobytes() for k in saved.params if k.startswith("canon.")}

                    def watch(model, step, frozen=frozen):
                        if any(model.params[k].data.tobytes() != v for k, v in frozen.items()):
                            drift.append((shots, s, step))
                else:
                    watch = None
                for r in REFINE_SEEDS:
                    if mode == "cls_only":
                        # no pretraining: the whole network learns from the shots at the pretraining rate
                        base, lr = build_model(ArchConfig.desk(), 1000 * s + r), LR
                    else:
                        base, lr = pretrained["models"][mode, s], REFINE_LR
                    refined, a = refine_fewshot(base, tt, te, shots, lr=lr, seed=r, on_step=watch)
                    acc[mode, shots, s, r] = a
                    if mode == "latent_canon":
                        votes.append({
                            "single": single_path_accuracy(refined, te),
                            **{v: vote_accuracy(refined, te, v) for v in ("simple7", "plus_idempotent", "plus_pairs")},
                        })
    return {"acc": acc, "votes": votes, "drift": drift, "cpu": cpu() - t0}


def _mean(acc, mode, shots):
    return float(np.mean([acc[mode, shots, s, r] for s in SEEDS for r in REFINE_SEEDS]))


@pytest.mark.criterion(5, "few-shot directional transfer")
def test_fewshot_direction(sweep, pretrained, record_property):
    acc = sweep["acc"]
    means = {(mode, shots): _mean(acc, mode, shots)
             for mode in ("latent_canon", "ae_cls", "cls_only") for shots in SHOTS}
    total = pretrained["cpu"] + sweep["cpu"]
    note(record_property, "; ".join(
        f"{shots} shots: lc {means['latent_canon', shots]:.3f} ae {means['ae_cls', shots]:.3f} "
        f"cls {means['cls_only', shots]:.3f}" for shots in SHOTS) + f"; {total / 60:.0f} min")
    for shots in SHOTS:
        assert means["latent_canon", shots] >= means["ae_cls", shots]
        assert means["ae_cls", shots] > means["cls_only", shots]
        assert means["latent_canon", shots] > means["cls_only", shots]
    assert total < 3600


@pytest.mark.criterion(6, "majority vote")
def test_majority_vote(sweep, record_property):
    votes = sweep["votes"]
    assert len(votes) == len(SHOTS) * len(SEEDS) * len(REFINE_SEEDS)
    gain = np.array([v["simple7"] - v["single"] for v in votes])
    simple = np.mean([v["simple7"] for v in votes])
    idem = np.mean([v["plus_idempotent"] for v in votes])
    pairs = np.mean([v["plus_pairs"] for v in votes])
    note(record_property, f"worst gain {gain.min():+.3f}, mean gain {gain.mean():+.4f}, "
                          f"simple7 {simple:.3f} idem {idem:.3f} pairs {pairs:.3f}")
    assert np.all(gain >= -0.01)
    assert gain.mean() >= 0
    assert abs(idem - simple) <= 0.015
    assert abs(pairs - simple) <= 0.015


@pytest.mark.criterion(7, "freeze contract")
def test_canonicalizers_stay_frozen(sweep, pretrained, record_property):
    assert sweep["drift"] == []
    n_runs = len(SHOTS) * len(SEEDS) * len(REFINE_SEEDS)
    note(record_property, f"{n_runs} refinement runs checked after every step")
    # the source models themselves are untouched as well
    for s in SEEDS:
        saved = load_checkpoint(pretrained["paths"]["latent_canon", s])[0]
        live = pretrained["models"]["latent_canon", s]
        for k in saved.params:
            assert saved.params[k].data.tobytes() == live.params[k].data.tobytes()


# ---------------------------------------------------------------------------
# 8-9. linear structure of the latent
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def probes(data, pretrained):
    return {(mode, s): {r.spec.factor: r for r in probe_all(pretrained["models"][mode, s], data["probe"], seed=s)}
            for mode in ("latent_canon", "ae_cls") for s in SEEDS}


@pytest.mark.criterion(8, "probe directionality")
def test_probe_directionality(probes, record_property):
    mean = {(mode, f): np.mean([probes[mode, s][f].accuracy for s in SEEDS])
            for mode in ("latent_canon", "ae_cls") for f in (*PROBE_ORDER, "digit")}
    weak = sorted((r.margin, mode, s, f) for (mode, s), per in probes.items() for f, r in per.items() if r.margin < 3)
    note(record_property, ", ".join(f"{f} {mean['latent_canon', f]:.3f}/{mean['ae_cls', f]:.3f}"
                                    for f in ("bg_color", "font_color", "rotation"))
         + f"; {len(weak)} of {sum(map(len, probes.values()))} probes under 3 sd"
         + (f", weakest {weak[0][3]} {weak[0][0]:.1f} sd" if weak else ""))
    for f in ("bg_color", "font_color", "rotation"):
        assert mean["latent_canon", f] > mean["ae_cls", f], f
    assert not weak, weak


@pytest.mark.criterion(9, "PCA linearity")
def test_pca_linearity(data, pretrained, record_property):
    ds = data["probe"]
    rotation = ds.factor_values("rotation")
    rows = []
    for s in SEEDS:
        m = pretrained["models"]["latent_canon", s]
        rot = abs(spearman(pca_delta(m, ds, 4, 1000).projections, rotation))
        raw = abs(spearman(bypass_pc_control(m, ds, 1000).projections, rotation))
        rows.append((rot, raw))
    note(record_property, ", ".join(f"seed {s}: {a:.2f} vs {b:.2f}" for s, (a, b) in zip(SEEDS, rows)))
    for rot, raw in rows:
        assert rot > 0.5
        assert raw < rot


# ---------------------------------------------------------------------------
# 10. ablations
# ---------------------------------------------------------------------------

@pytest.mark.criterion(10, "ablation plumbing")
def test_ablation_flags_train_and_log(record_property):
    ds = SceneDataset.sample(FactorRanges.desk(), 256, seed=9, size=16)
    seen = []
    for flag, column in [("idempotency_recon", "idempotency"), ("classifier_post_canon", "post_canon_ce"),
                         ("latent_consistency", "latent_reg")]:
        m = build_model(ArchConfig.desk(), 0)
        log = pretrain(m, ds, TrainMode("latent_canon", **{flag: True}), epochs=2, seed=0, lr=LR)
        assert len(log.rows) == 2
        values = log.column(column)
        assert all(np.isfinite(values)) and all(v > 0 for v in values), (flag, values)
        seen.append(f"{flag} {column}={values[-1]:.3g}")
    note(record_property, "; ".join(seen))
