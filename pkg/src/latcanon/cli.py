"""Command-line entry point: ``latcanon <command> [options]``.

Every run is driven by a flat ``key=value`` config (file via ``--config``,
single keys via ``--set key=value``) and writes the fully resolved config
back into its output directory.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import analysis
from .canonlearn import (LossWeights, NumericError, TrainMode, accuracy, pretrain, refine_fewshot,
                         vote_accuracy)
from .canonlearn.vote import VOTE_SETS
from .network import ArchConfig, build_model, load_checkpoint, save_checkpoint
from .simgen import (DEFAULT_SHIFT, SUPERVISED, ExternalDataset, FactorRanges, estimate_factor_space,
                     generate_dataset, read_dataset, shifted_domain, write_dataset)
from .simgen.imageio import read_pnm

log = logging.getLogger("latcanon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    pretrain_seeds: tuple[int, ...] = (0, 1, 2)
    refine_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    mode: str = "latent_canon"
    idempotency_recon: bool = False
    classifier_post_canon: bool = False
    latent_consistency: bool = False
    latent_scale: float = 1e-7
    ce_weight: float = 50.0
    alpha: float = 1.0
    beta: float = 1.0
    recon_reduction: str = "sum"
    epochs: int = 0  # 0: profile default
    refine_epochs: int = 50
    lr: float = 0.0  # 0: profile default
    refine_lr: float = 1e-4
    refine_head_lr: float = 1e-2
    batch_size: int = 0  # 0: profile default
    ckpt_every: int = 0
    shots: tuple[int, ...] = (10, 20, 50, 100, 1000)
    vote_set: str = "simple7"
    train_data: str = ""
    target_train: str = ""
    target_test: str = ""
    out: str = "runs/latcanon"
    latent_dim: int = 0  # 0: profile default
    image_size: int = 0
    n_samples: int = 1000
    probe_epochs: int = 300

    def arch(self, channels: int = 3) -> ArchConfig:
        base = ArchConfig.desk() if self.profile == "desk" else ArchConfig.paper()
        kw = {"image_channels": channels}
        if self.latent_dim:
            kw["latent_dim"] = self.latent_dim
        if self.image_size:
            kw["image_size"] = self.image_size
        return replace(base, **kw)

    def train_mode(self) -> TrainMode:
        return TrainMode(self.mode, self.idempotency_recon, self.classifier_post_canon,
                         self.latent_consistency, self.latent_scale)

    def weights(self) -> LossWeights:
        return LossWeights(self.ce_weight, self.alpha, self.beta, self.recon_reduction)

    def ranges(self) -> FactorRanges:
        return FactorRanges.desk() if self.profile == "desk" else FactorRanges()

    def learning_rate(self) -> float:
        return self.lr or (1e-3 if self.profile == "paper" else 3e-3)

    def batch(self) -> int:
        return self.batch_size or (64 if self.profile == "paper" else 16)

    def pretrain_epochs(self) -> int:
        return self.epochs or (400 if self.profile == "paper" else 20)

    def validate(self) -> "RunConfig":
        if self.profile not in ("paper", "desk"):
            raise ConfigError(f"profile must be paper or desk, got {self.profile!r}")
        if self.vote_set not in VOTE_SETS:
            raise ConfigError(f"vote_set must be one of {VOTE_SETS}")
        try:
            self.train_mode()
            self.arch().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


_FIELD_TYPES = {f.name: f.default for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` lines (``#`` starts a comment) on top of ``base``."""
    updates = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        updates[key.strip()] = _coerce(key.strip(), value)
    return replace(base or RunConfig(), **updates)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = parse_config(text, cfg)
    cfg = parse_config("\n".join(args.set or []), cfg)
    overrides = {k: getattr(args, k) for k in ("seed", "out", "profile") if getattr(args, k) is not None}
    return replace(cfg, **overrides).validate()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_data(path: str, what: str):
    if not path:
        raise ConfigError(f"no {what} dataset configured")
    try:
        return read_dataset(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _check_fresh(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig) -> int:
    if args.out_file:
        out = Path(args.out_file)
    elif cfg.out.endswith(".lcds"):
        out = Path(cfg.out)
    else:
        out = Path(cfg.out) / f"{args.kind}.lcds"
    _check_fresh(out, args.force)
    seed = cfg.seed
    size = args.size or (16 if args.kind == "dsprites" or cfg.profile == "desk" else 32)
    if args.kind == "shifted":
        shift = json.loads(args.shift) if args.shift else DEFAULT_SHIFT
        try:
            ranges = shifted_domain(cfg.ranges(), shift)
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        ds = generate_dataset("svhn", args.n, seed, out, ranges=ranges, size=size)
    else:
        ranges = cfg.ranges() if args.kind == "svhn" else None
        ds = generate_dataset(args.kind, args.n, seed, out, ranges=ranges, size=size)
    print(f"wrote {len(ds)} {args.kind} records ({ds.channels}x{ds.size}x{ds.size}) to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _load_data(args.data or cfg.train_data, "training")
    out = Path(cfg.out)
    seeds = (cfg.seed,) if args.single else cfg.pretrain_seeds
    for seed in seeds:
        run_dir = out / f"seed{seed}"
        _check_fresh(run_dir / "final.lcck", args.force)
        arch = replace(cfg.arch(ds.channels), image_size=ds.size)
        m = build_model(arch, seed)
        try:
            trainlog = pretrain(m, ds, cfg.train_mode(), cfg.pretrain_epochs(), lr=cfg.learning_rate(), seed=seed,
                                batch_size=cfg.batch(), weights=cfg.weights(),
                                ckpt_dir=run_dir / "checkpoints", ckpt_every=cfg.ckpt_every,
                                log_csv=run_dir / "train_log.csv")
        finally:
            cfg.write(run_dir)
        save_checkpoint(run_dir / "final.lcck", m, extra={"epoch": cfg.pretrain_epochs(), "mode": cfg.mode,
                                                         "train_err": trainlog.rows[-1]["train_err"]})
        print(f"seed {seed}: final total loss {trainlog.rows[-1]['total']:.4f}, "
              f"train error {trainlog.rows[-1]['train_err']:.4f}")
    cfg.write(out)
    return EXIT_OK


def _pretrained(cfg: RunConfig, ckpts) -> list[tuple[int, object]]:
    if ckpts:
        return [(i, _load_ckpt(p)[0]) for i, p in enumerate(ckpts)]
    found = []
    for seed in cfg.pretrain_seeds:
        path = Path(cfg.out) / f"seed{seed}" / "final.lcck"
        if not path.exists():
            raise DataError(f"missing checkpoint {path}; run `train` first")
        found.append((seed, _load_ckpt(path)[0]))
    return found


def cmd_refine(args, cfg: RunConfig) -> int:
    tr = _load_data(args.target_train or cfg.target_train, "target train")
    te = _load_data(args.target_test or cfg.target_test, "target test")
    from_scratch = cfg.mode == "cls_only"
    if from_scratch:
        arch = replace(cfg.arch(tr.channels), image_size=tr.size)
        models = [(s, None) for s in cfg.pretrain_seeds]
    else:
        models = _pretrained(cfg, args.ckpt)
    rows = []
    for shots in cfg.shots:
        accs = []
        for pseed, m in models:
            for rseed in cfg.refine_seeds:
                if from_scratch:
                    m = build_model(arch, 1000 * pseed + rseed)
                    lr = cfg.learning_rate()
                else:
                    lr = cfg.refine_lr
                try:
                    refined, acc = refine_fewshot(m, tr, te, shots, lr=lr, epochs=cfg.refine_epochs,
                                                  seed=rseed, head_lr=cfg.refine_head_lr)
                except ValueError as exc:
                    raise DataError(str(exc)) from exc
                vacc = vote_accuracy(refined, te, cfg.vote_set) if cfg.mode == "latent_canon" else acc
                rows.append([shots, pseed, rseed, f"{acc:.6f}", f"{vacc:.6f}"])
                accs.append((acc, vacc))
        mean, std = summarize([a for a, _ in accs])
        vmean, vstd = summarize([v for _, v in accs])
        print(f"{shots:>5} shots: {100 * mean:.2f} ± {100 * std:.2f}%  vote {100 * vmean:.2f} ± {100 * vstd:.2f}%")
    out = Path(cfg.out)
    _write_rows(out / f"refine_{cfg.mode}.csv", ["shots", "pretrain_seed", "refine_seed", "accuracy",
                                                  "vote_accuracy"], rows)
    cfg.write(out)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ds = _load_data(args.data or cfg.target_test, "evaluation")
    models = _pretrained(cfg, args.ckpt)
    rows = []
    for i, m in models:
        plain = accuracy(m, ds)
        votes = {v: vote_accuracy(m, ds, v) for v in VOTE_SETS}
        rows.append([i, f"{plain:.6f}", *(f"{votes[v]:.6f}" for v in VOTE_SETS)])
    cols = list(zip(*rows))[1:]
    for name, col in zip(["plain", *VOTE_SETS], cols):
        mean, std = summarize([float(x) for x in col])
        print(f"{name:>16}: {100 * mean:.2f} ± {100 * std:.2f}%")
    out = Path(cfg.out)
    _write_rows(out / "eval.csv", ["model", "accuracy", *VOTE_SETS], rows)
    cfg.write(out)
    return EXIT_OK


def _parse_bins(text: str) -> list[int]:
    try:
        bins = [int(b) for b in text.split(",")]
    except ValueError:
        raise ConfigError(f"--bins expects comma-separated integers, got {text!r}") from None
    if not bins or min(bins) < 1:
        raise ConfigError("bin counts must be positive")
    return bins


def cmd_space(args, cfg: RunConfig) -> int:
    product, coverage = estimate_factor_space(_parse_bins(args.bins), args.n)
    print(product)
    print(f"coverage {args.n}/{product} = {coverage:.6f} ({100 * coverage:.2f}%)")
    return EXIT_OK


def _canon_id(name: str) -> int:
    if name.isdigit():
        return int(name)
    if name not in SUPERVISED:
        raise ConfigError(f"unknown canonicalizer {name!r}; expected one of {SUPERVISED}")
    return SUPERVISED.index(name)


def cmd_analyze(args, cfg: RunConfig) -> int:
    if args.what == "space":
        return cmd_space(args, cfg)
    out = Path(cfg.out) / "analysis"
    if args.what == "zeroshot":
        if not args.ckpts:
            raise ConfigError("zeroshot needs --ckpts")
        te = _load_data(args.data or cfg.target_test, "target test")
        rows, r = analysis.zero_shot_curve(args.ckpts, te, out_csv=_mkparent(out / "zero_shot.csv"))
        print(f"{len(rows)} checkpoints, Pearson r = {r:.4f}")
        return EXIT_OK
    if not args.ckpt:
        raise ConfigError(f"analyze {args.what} needs --ckpt")
    m, _, _ = _load_ckpt(args.ckpt[0])
    ds = _load_data(args.data or cfg.train_data, "analysis")
    if args.what == "probes":
        results = analysis.probe_all(m, ds, seed=cfg.seed, epochs=cfg.probe_epochs)
        analysis.write_probe_csv(results, _mkparent(out / "probes.csv"))
        for res in results:
            print(f"{res.spec.factor:>10}: {100 * res.accuracy:6.2f}% (chance {100 * res.spec.chance:.2f}%)")
    elif args.what == "pca":
        j = _canon_id(args.canon)
        n = min(cfg.n_samples, len(ds))
        res = analysis.pca_delta(m, ds, j, n)
        name = SUPERVISED[j]
        analysis.sort_strip(ds, res, out, f"pca_{name}", n_show=args.n_show, spacing=args.spacing)
        ctrl = analysis.bypass_pc_control(m, ds, n)
        analysis.sort_strip(ds, ctrl, out, "pca_bypass", n_show=args.n_show, spacing=args.spacing)
        rows = [["canon", name, *res.explained_variance[:5]], ["bypass", "", *ctrl.explained_variance[:5]]]
        if hasattr(ds, "factor_values") and name in ("rotation", "shear", "font_size"):
            truth = ds.factor_values(name)[:n]
            rho, rho_ctrl = analysis.spearman(res.projections, truth), analysis.spearman(ctrl.projections, truth)
            rows[0].append(rho)
            rows[1].append(rho_ctrl)
            print(f"|spearman| first PC vs {name}: canon {abs(rho):.3f}, bypass {abs(rho_ctrl):.3f}")
        _write_rows(out / f"pca_{name}_summary.csv",
                    ["source", "canon", "var1", "var2", "var3", "var4", "var5", "spearman"], rows)
    cfg.write(out)
    return EXIT_OK


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_ingest(args, cfg: RunConfig) -> int:
    src = Path(args.dir)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".ppm", ".pgm")) if src.is_dir() else []
    if not files:
        raise DataError(f"no .ppm/.pgm files in {src}")
    labels = {}
    try:
        with open(args.labels, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().lower() in ("file", "filename", "name"):
                    continue
                labels[row[0].strip()] = int(row[1])
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"bad labels file {args.labels}: {exc}") from exc
    size = args.size or cfg.arch().image_size
    images, ys = [], []
    for p in files:
        try:
            pix = read_pnm(p)
        except (OSError, ValueError) as exc:
            raise DataError(f"{p.name}: {exc}") from exc
        if pix.shape[0] != size or pix.shape[1] != size:
            raise DataError(f"{p.name}: expected {size}x{size}, got {pix.shape[1]}x{pix.shape[0]}")
        if p.name not in labels or not 0 <= labels[p.name] <= 9:
            raise DataError(f"{p.name}: missing or out-of-range label")
        images.append(pix if pix.ndim == 3 else pix[..., None])
        ys.append(labels[p.name])
    if len({im.shape for im in images}) != 1:
        raise DataError("mixed PPM/PGM channel counts")
    out = Path(args.out_file or Path(cfg.out) / "external.lcds")
    _check_fresh(out, args.force)
    write_dataset(ExternalDataset(np.stack(images), ys), out)
    print(f"wrote {len(images)} external records to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--profile", choices=("paper", "desk"))
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="latcanon", description="Latent canonicalization experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a dataset file")
    g.add_argument("--kind", choices=("svhn", "shifted", "dsprites"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int)
    g.add_argument("--shift", help="JSON shift spec for --kind shifted")
    g.add_argument("-o", "--out-file", help="output .lcds path (default: <out>/<kind>.lcds)")

    t = sub.add_parser("train", parents=[common], help="pretrain on a simulated dataset")
    t.add_argument("--data")
    t.add_argument("--single", action="store_true", help="train only --seed instead of pretrain_seeds")

    r = sub.add_parser("refine", parents=[common], help="few-shot refinement sweep")
    r.add_argument("--ckpt", nargs="*")
    r.add_argument("--target-train")
    r.add_argument("--target-test")

    e = sub.add_parser("eval", parents=[common], help="plain and majority-vote accuracy")
    e.add_argument("--ckpt", nargs="*")
    e.add_argument("--data")

    a = sub.add_parser("analyze", parents=[common], help="probes, PCA strips, zero-shot curve, space")
    a.add_argument("what", choices=("probes", "pca", "zeroshot", "space"))
    a.add_argument("--ckpt", nargs="*")
    a.add_argument("--ckpts", nargs="*", help="checkpoints for the zero-shot curve")
    a.add_argument("--data")
    a.add_argument("--canon", default="rotation")
    a.add_argument("--n-show", type=int, default=20)
    a.add_argument("--spacing", choices=("normal", "uniform"), default="normal")
    a.add_argument("--bins", default="30,64,64,6,6,10")
    a.add_argument("--n", type=int, default=75000)

    i = sub.add_parser("ingest", parents=[common], help="pack PPM/PGM images into an external dataset")
    i.add_argument("--dir", required=True)
    i.add_argument("--labels", required=True, help="CSV of filename,label")
    i.add_argument("--size", type=int)
    i.add_argument("-o", "--out-file")

    s = sub.add_parser("space", parents=[common], help="combination-space size and coverage")
    s.add_argument("--bins", required=True)
    s.add_argument("--n", type=int, default=75000)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "refine": cmd_refine, "eval": cmd_eval,
            "analyze": cmd_analyze, "ingest": cmd_ingest, "space": cmd_space}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, OverflowError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
