"""Command line entry point: ``fmps {train,sample,invert,ablate,eval} --config FILE``.

Exit status: 0 success, 1 other library error, 2 bad configuration,
3 missing input file or unreadable checkpoint, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, MissingInputError, load_config
from .datasets import Dataset
from .errors import ContractViolation, DivergenceError, FMPSError
from .gaussian import GaussianSpec, exact_posterior
from .guidance import ClassifierLogitEnergy, Downsample, GaussianBlur, GuidanceEnergy, Identity, InpaintMask
from .imageio import FormatError, load_array, read_csv_vectors, write_csv_vectors
from .metrics import MetricRow, mmd_rbf, psnr, sliced_wasserstein, write_metric_csv
from .sampler import SamplerConfig, Variant, sample
from .schedule import FlowSchedule
from .training import TrainConfig, train, train_classifier, write_loss_csv
from .velocity import (
    CheckpointError,
    Classifier,
    GaussianVelocityField,
    MLPVelocityField,
    load_checkpoint,
    save_checkpoint,
)
from . import report

log = logging.getLogger("fmps")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3, 4


# ------------------------------------------------------------------ builders


def build_schedule(cfg: ExperimentConfig) -> FlowSchedule:
    m = cfg["model"]
    return FlowSchedule(m["schedule"], t_min=m["t_min"], t_max=m["t_max"])


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    tr = cfg["train"]
    return Dataset(tr["dataset"], seed=tr["seed"], noise=tr["noise"], idx_path=tr["idx_path"],
                   labels_path=tr["labels_path"])


def gaussian_spec(cfg: ExperimentConfig) -> GaussianSpec:
    m = cfg["model"]
    mean = m["mean"] if m["mean"] is not None else [0.0] * m["dim"]
    var = m["var"] if m["var"] is not None else [1.0] * m["dim"]
    return GaussianSpec(np.array(mean), np.array(var))


def build_field(cfg: ExperimentConfig):
    """Analytic Gaussian field, or the MLP stored at ``model.checkpoint``."""
    if cfg["model"]["kind"] == "gaussian":
        return GaussianVelocityField(gaussian_spec(cfg), build_schedule(cfg))
    path = Path(cfg["model"]["checkpoint"])
    if not path.is_file():
        raise MissingInputError(f"checkpoint not found: {path} (run 'fmps train' first)")
    model = load_checkpoint(path)
    if not isinstance(model, MLPVelocityField):
        raise CheckpointError(f"{path}: holds a {type(model).__name__}, not a velocity field")
    return model


def _load_vector(value, shape) -> np.ndarray:
    arr = np.asarray(load_array(value) if isinstance(value, str) else value, dtype=np.float64)
    if arr.size != int(np.prod(shape)):
        raise ConfigError(f"task input {value if isinstance(value, str) else 'inline list'} has {arr.size} "
                          f"values, expected shape {tuple(shape)}")
    return arr.reshape(shape)


def build_operator(cfg: ExperimentConfig, data_shape):
    t = cfg["task"]
    kind = t["energy"]
    if kind == "identity":
        return Identity()
    if kind == "inpaint-mask":
        if t["mask"] is None:
            raise ConfigError("task.mask is required for inpaint-mask")
        return InpaintMask(_load_vector(t["mask"], data_shape))
    if kind == "downsample":
        return Downsample(t["factor"])
    if kind == "gaussian-blur":
        return GaussianBlur(t["kernel_size"], t["sigma"])
    return None


def _classifier(cfg: ExperimentConfig, data_shape) -> Classifier:
    t = cfg["task"]
    if t["classifier"]:
        clf = load_checkpoint(t["classifier"])
        if not isinstance(clf, Classifier):
            raise CheckpointError(f"{t['classifier']}: not a classifier checkpoint")
        return clf
    x, labels = build_dataset(cfg).sample_labeled(8192, np.random.default_rng(t["classifier_seed"]))
    clf = Classifier(data_shape, t["classifier_hidden"], seed=t["classifier_seed"])
    return train_classifier(clf, x, (labels == t["target_class"]).astype(int), steps=t["classifier_steps"],
                            seed=t["classifier_seed"]).field


def build_energy(cfg: ExperimentConfig, data_shape):
    """Returns (energy, truth) where truth is the clean signal when one was given."""
    t = cfg["task"]
    kind = t["energy"]
    if kind == "none":
        return None, None
    if kind == "classifier-logit":
        return ClassifierLogitEnergy(_classifier(cfg, data_shape), target=1), None
    op = build_operator(cfg, data_shape)
    truth = _load_vector(t["truth"], data_shape) if t["truth"] is not None else None
    if t["condition"] is not None:
        obs_shape = op.apply(np.zeros((1, *data_shape))).shape[1:]
        cond = _load_vector(t["condition"], obs_shape)
    elif truth is not None:
        cond = op.apply(truth[None])[0]
    else:
        raise ConfigError(f"task.condition or task.truth is required for {kind}")
    return GuidanceEnergy(op, cond), truth


def sampler_config(cfg: ExperimentConfig, variant=None, r=None, normalization=None) -> SamplerConfig:
    s = cfg["sampler"]
    cap = s["correction_cap"]
    return SamplerConfig(
        variant=variant or s["variant"],
        steps=s["steps"],
        r=s["r"] if r is None else r,
        normalization=s["normalization"] if normalization is None else normalization,
        seed=s["seed"],
        chains=s["chains"],
        correction_cap=cap if cap > 0 else None,
        schedule=build_schedule(cfg),
    )


# ------------------------------------------------------------------ outputs


class RunOutputs:
    """Tracks files written by one command so the manifest can hash them."""

    def __init__(self, out_dir: Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.files.append(p)
        return p

    def manifest(self, verb: str, cfg: ExperimentConfig, threads: int) -> Path:
        import scipy

        body = {
            "verb": verb,
            "fmps_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "config_hash": cfg.digest(),
            "seed": {"train": cfg["train"]["seed"], "sampler": cfg["sampler"]["seed"]},
            "threads": threads,
            "config": cfg.to_dict(),
            "outputs": {
                p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(self.files) if p.exists()
            },
        }
        path = self.dir / f"{verb}.manifest.json"
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


def _write_samples(outs: RunOutputs, stem: str, x: np.ndarray, figures: bool) -> None:
    write_csv_vectors(outs.path(f"{stem}.csv"), x)
    if x.ndim == 2 and x.shape[1] == 2:
        report.write_density_ppm(outs.path(f"{stem}_density.ppm"), x)
        if figures:
            report.plot_scatter(outs.path(f"{stem}.png"), {stem: x})
    elif x.ndim == 3:
        report.write_image_grid(outs.path(f"{stem}_grid.pgm"), x[:64])


# ------------------------------------------------------------------ commands


def cmd_train(cfg: ExperimentConfig, threads: int = 1) -> RunOutputs:
    if cfg["model"]["kind"] != "mlp":
        raise ConfigError("train needs model.kind = \"mlp\"; the gaussian field is analytic")
    m, tr = cfg["model"], cfg["train"]
    dataset = build_dataset(cfg)
    field = MLPVelocityField(dataset.data_shape, tuple(m["hidden"]), m["time_embed"], m["activation"],
                             m["init_seed"], build_schedule(cfg))
    tconf = TrainConfig(tr["batch_size"], tr["steps"], tr["lr"], tr["optimizer"], tr["seed"],
                        tr["checkpoint_every"])
    outs = RunOutputs(cfg.out_dir)
    ckpt = Path(m["checkpoint"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    result = train(field, dataset, tconf, checkpoint_path=ckpt)
    save_checkpoint(result.field, ckpt)
    if ckpt.parent == outs.dir:
        outs.files.append(ckpt)
    write_loss_csv(result.losses, outs.path("loss.csv"))
    if cfg["output"]["figures"] and result.losses:
        report.plot_loss(outs.path("loss.png"), result.losses)
    log.info("trained %d steps, final loss %.4f", tr["steps"], result.losses[-1] if result.losses else float("nan"))
    return outs


def cmd_sample(cfg: ExperimentConfig, threads: int = 1) -> RunOutputs:
    field = build_field(cfg)
    sconf = sampler_config(cfg)
    energy = None
    if sconf.variant is not Variant.UNCONDITIONAL:
        energy, _ = build_energy(cfg, field.data_shape)
        if energy is None and sconf.r > 0:
            raise ConfigError(f"sampler.variant = {sconf.variant.value} with r > 0 needs a task.energy")
    x, traj = sample(field, sconf, energy, threads=threads)
    outs = RunOutputs(cfg.out_dir)
    _write_samples(outs, "samples", x.data, cfg["output"]["figures"])
    traj.to_csv(outs.path("trajectory.csv"))
    return outs


def _task_name(cfg: ExperimentConfig) -> str:
    t = cfg["task"]["energy"]
    return cfg["train"]["dataset"] if t == "none" else t


def cmd_invert(cfg: ExperimentConfig, threads: int = 1) -> RunOutputs:
    """Unconditional baseline plus both guided variants at the configured r."""
    field = build_field(cfg)
    energy, truth = build_energy(cfg, field.data_shape)
    if energy is None:
        raise ConfigError("invert needs task.energy other than \"none\"")
    outs = RunOutputs(cfg.out_dir)
    r = cfg["sampler"]["r"]
    T = cfg["sampler"]["steps"]
    rows, panels = [], {}
    for variant in Variant:
        vr = 0.0 if variant is Variant.UNCONDITIONAL else r
        x, traj = sample(field, sampler_config(cfg, variant=variant.value, r=vr), energy, threads=threads)
        x = x.data
        stem = f"samples_{variant.value}"
        write_csv_vectors(outs.path(f"{stem}.csv"), x)
        traj.to_csv(outs.path(f"trajectory_{variant.value}.csv"))
        if x.ndim == 3:
            report.write_image_grid(outs.path(f"{stem}_grid.pgm"), x[:64])
        panels[variant.value] = x
        task = _task_name(cfg)
        rows.append(MetricRow(task, variant.value, vr, T, "residual_mean", float(np.mean(energy.residual(x)))))
        if truth is not None:
            rows.append(MetricRow(task, variant.value, vr, T, "psnr_mean",
                                  float(np.mean([psnr(xi, truth) for xi in x]))))
    write_metric_csv(rows, outs.path("metrics.csv"))
    first = next(iter(panels.values()))
    if cfg["output"]["figures"] and first.ndim == 2 and first.shape[1] == 2:
        report.plot_scatter(outs.path("invert.png"), panels)
    return outs


ABLATE_HEADER = ["variant", "normalization", "r", "T", "chains", "residual_mean", "energy_mean",
                 "max_correction_ratio", "seconds_per_sample"]


def cmd_ablate(cfg: ExperimentConfig, threads: int = 1) -> RunOutputs:
    """r x normalization x variant grid; every column except seconds_per_sample is deterministic."""
    import csv

    field = build_field(cfg)
    energy, _ = build_energy(cfg, field.data_shape)
    if energy is None:
        raise ConfigError("ablate needs task.energy other than \"none\"")
    outs = RunOutputs(cfg.out_dir)
    T, chains = cfg["sampler"]["steps"], cfg["sampler"]["chains"]
    series = {}
    with open(outs.path("ablate.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATE_HEADER)
        for variant in (Variant.FMPS_GRADIENT, Variant.FMPS_FREE):
            for norm in (True, False):
                xs, ys = [], []
                for r in cfg["sampler"]["r_values"]:
                    sconf = sampler_config(cfg, variant=variant.value, r=r, normalization=norm)
                    start = time.perf_counter()
                    try:
                        x, traj = sample(field, sconf, energy, threads=threads)
                        res = float(np.mean(energy.residual(x.data)))
                        eng = float(np.mean(energy(x).data))
                        ratio = traj.max_correction_ratio()
                    except DivergenceError as exc:
                        log.warning("%s r=%g normalization=%s diverged at step %d", variant.value, r, norm, exc.step)
                        res = eng = ratio = float("nan")
                    per = (time.perf_counter() - start) / chains
                    w.writerow([variant.value, "on" if norm else "off", repr(float(r)), T, chains, repr(res),
                                repr(eng), repr(ratio), f"{per:.6e}"])
                    xs.append(r)
                    ys.append(res)
                series[f"{variant.value} ({'on' if norm else 'off'})"] = (xs, ys)
    if cfg["output"]["figures"]:
        report.plot_sweep(outs.path("ablate.png"), series, xlabel="r", ylabel="mean residual")
    return outs


def _reference(cfg: ExperimentConfig, n: int, seed: int, data_shape):
    ev = cfg["eval"]
    rng = np.random.default_rng(seed)
    if ev["reference"] == "dataset":
        return build_dataset(cfg).sample(n, rng)
    if ev["reference"] == "posterior":
        if cfg["model"]["kind"] != "gaussian" or cfg["task"]["energy"] not in ("inpaint-mask", "identity", "none"):
            raise ConfigError("eval.reference = \"posterior\" needs the gaussian model and a mask/identity task")
        spec = gaussian_spec(cfg)
        if cfg["task"]["energy"] == "none":
            return spec.sample(n, rng)
        energy, _ = build_energy(cfg, data_shape)
        mask = energy.operator.mask if isinstance(energy.operator, InpaintMask) else np.ones(spec.dim)
        post = exact_posterior(spec, mask, energy.condition, 0.0)
        return rng.multivariate_normal(post.mean, post.cov, size=n, method="eigh")
    return read_csv_vectors(ev["reference"])


def cmd_eval(cfg: ExperimentConfig, threads: int = 1) -> RunOutputs:
    ev, s = cfg["eval"], cfg["sampler"]
    path = Path(ev["samples"]) if ev["samples"] else cfg.out_dir / "samples.csv"
    if not path.is_file():
        raise MissingInputError(f"sample file not found: {path} (run 'fmps sample' first)")
    x = read_csv_vectors(path)
    ref = _reference(cfg, ev["reference_count"], ev["seed"], x.shape[1:]).reshape(-1, x.shape[1])
    task, label, r, T = _task_name(cfg), ev["label"], s["r"], s["steps"]
    bw = ev["bandwidth"]
    rows = [
        MetricRow(task, label, r, T, "mmd2_biased", mmd_rbf(x, ref, bw, biased=True)),
        MetricRow(task, label, r, T, "mmd2_unbiased", mmd_rbf(x, ref, bw)),
        MetricRow(task, label, r, T, "sliced_wasserstein", sliced_wasserstein(x, ref, ev["projections"], ev["seed"])),
    ]
    if ev["reference"] in ("dataset", "posterior"):
        # spread between two independent reference draws, for scale
        twin = _reference(cfg, ev["reference_count"], ev["seed"] + 1, x.shape[1:]).reshape(-1, x.shape[1])
        rows.append(MetricRow(task, "reference-vs-reference", r, T, "mmd2_biased", mmd_rbf(twin, ref, bw, biased=True)))
        rows.append(MetricRow(task, "reference-vs-reference", r, T, "sliced_wasserstein",
                              sliced_wasserstein(twin, ref, ev["projections"], ev["seed"])))
    rows.append(MetricRow(task, label, r, T, "mean_abs_error", float(np.abs(x.mean(0) - ref.mean(0)).max())))
    rows.append(MetricRow(task, label, r, T, "var_abs_error", float(np.abs(x.var(0) - ref.var(0)).max())))
    outs = RunOutputs(cfg.out_dir)
    write_metric_csv(rows, outs.path("eval.csv"))
    return outs


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "invert": cmd_invert, "ablate": cmd_ablate, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmps", description="Flow-matching posterior sampling experiments.")
    p.add_argument("--version", action="version", version=f"fmps {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML config, or a manifest.json from an earlier run")
    common.add_argument("--seed", type=int, default=None, help="override train and sampler seeds")
    common.add_argument("--out", default=None, help="override output.dir")
    common.add_argument("--threads", type=int, default=1, help="worker threads for sampling chains")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
        outs = COMMANDS[args.verb](cfg, threads=args.threads)
        manifest = outs.manifest(args.verb, cfg, args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, ContractViolation, FMPSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{args.verb}: wrote {len(outs.files)} files and {manifest}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
