"""Command-line entry point: ``gan-pad <command> [--config FILE] [--section.key VALUE ...]``.

Configuration is layered: built-in defaults, then a JSON file of flat dotted
keys (``{"gan.learning_rate": 0.0002, "paths.data_root": "data"}``), then
command-line flags of the same names. One root ``seed`` is split into
independent data, init, training and sampling seeds.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure
(a non-finite loss, or a failed gradient or transplant check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import BONA_FIDE, errors
from .aetrain import AeTrainConfig, finetune_ae, loss_gradient_check
from .diagnostics import latent_interpolation, mode_collapse_score, sample_patches
from .evaluate import (calibrate_model, det_curve, evaluate_model, plot_det, read_scores, ThresholdModel,
                       write_det)
from .gantrain import GanTrainConfig, gan_gradient_check, train_gan, _probe_init
from .models import (DEFAULT_WIDTHS, LATENT_DIM, build_autoencoder, load_checkpoint, read_manifest,
                     save_checkpoint)
from .preproc import DEFAULT_BACKGROUND_THRESHOLD, AugmentConfig, TrainStream, eval_patches
from .rng import subsystem_seed
from .synthdata import ATTACK_KINDS, AttackKind, SynthParams, build_corpus, load_image, scan_dataset
from .transfer import transplant, verify_transplant

log = logging.getLogger("gan_pad")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


# --------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class CorpusConfig:
    n_bona_train: int = 1122
    n_bona_val: int = 128
    n_pa_val: int = 128
    attack_magnitude: float = 0.5
    attacks: tuple[str, ...] = ATTACK_KINDS

    def __post_init__(self):
        if min(self.n_bona_train, self.n_bona_val, self.n_pa_val) < 1:
            raise errors.InvalidParams("corpus counts must be >= 1")
        if not self.attacks:
            raise errors.InvalidParams("corpus.attacks must name at least one attack kind")
        for kind in self.attacks:
            AttackKind(kind, self.attack_magnitude)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    latent_dim: int = LATENT_DIM

    def __post_init__(self):
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise errors.InvalidParams(f"model.widths must be four positive channel counts, got {self.widths}")
        if self.latent_dim < 1:
            raise errors.InvalidParams("model.latent_dim must be positive")


@dataclasses.dataclass(frozen=True)
class PathsConfig:
    data_root: str = "data"
    out_dir: str = "runs/default"


@dataclasses.dataclass(frozen=True)
class PreprocConfig:
    background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.background_threshold <= 1.0:
            raise errors.InvalidParams("preproc.background_threshold must lie in (0, 1]")


def _section_fields(cls, skip=("seed",)):
    return [f for f in dataclasses.fields(cls) if f.name not in skip]


SECTIONS = {
    "synth": SynthParams,
    "corpus": CorpusConfig,
    "augment": AugmentConfig,
    "preproc": PreprocConfig,
    "model": ModelConfig,
    "gan": GanTrainConfig,
    "ae": AeTrainConfig,
    "paths": PathsConfig,
}


def config_keys() -> dict:
    """Every flat dotted key with its default value."""
    keys = {"seed": 0}
    for section, cls in SECTIONS.items():
        inst = cls()
        for f in _section_fields(cls):
            keys[f"{section}.{f.name}"] = getattr(inst, f.name)
    return keys


def _coerce(key, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes"):
                    return True
                if value.lower() in ("0", "false", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else list(value)
            kind = type(default[0]) if default else str
            return tuple(kind(v) for v in items)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise errors.InvalidParams(f"bad value for {key}: {value!r}") from exc


def resolve_config(config_file=None, overrides=None) -> dict:
    values = config_keys()
    layers = []
    if config_file:
        try:
            data = json.loads(Path(config_file).read_text())
        except OSError as exc:
            raise errors.InvalidParams(f"cannot read config file {config_file}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise errors.InvalidParams(f"config file {config_file} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise errors.InvalidParams(f"config file {config_file} must hold a JSON object")
        layers.append(data)
    layers.append(overrides or {})
    for layer in layers:
        for key, value in layer.items():
            if key not in values:
                raise errors.InvalidParams(f"unknown config key {key!r}")
            values[key] = _coerce(key, value, config_keys()[key])
    return values


def validate_config(values: dict) -> None:
    """Build every section once so bad values fail before any data is touched."""
    for name in SECTIONS:
        inst = section(values, name)
        if hasattr(inst, "validate"):
            inst.validate()


def section(values: dict, name: str, **extra):
    """The dataclass of one config section, built from the flat values."""
    cls = SECTIONS[name]
    kwargs = {f.name: values[f"{name}.{f.name}"] for f in _section_fields(cls)}
    kwargs.update(extra)
    return cls(**kwargs)


# --------------------------------------------------------------------------
# commands


def _out(values, *parts) -> Path:
    path = Path(values["paths.out_dir"]).joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, default=list) + "\n")


def _echo(values, prefixes, args=None) -> None:
    shown = {k: v for k, v in values.items() if k == "seed" or k.split(".")[0] in prefixes}
    print(json.dumps(shown, indent=2, default=list))


def cmd_synth_data(values, args):
    params = section(values, "synth", seed=0)
    corpus = section(values, "corpus")
    attacks = [AttackKind(k, corpus.attack_magnitude) for k in corpus.attacks]
    _echo(values, ("synth", "corpus", "paths"))
    index = build_corpus(corpus.n_bona_train, corpus.n_bona_val, corpus.n_pa_val, params, attacks,
                         subsystem_seed(values["seed"], "data"), values["paths.data_root"])
    print(json.dumps(index.to_json()["counts"], indent=2))


def _gan_setup(values):
    index = scan_dataset(values["paths.data_root"])
    gan_cfg = section(values, "gan", seed=values["seed"])
    stream = TrainStream(index, section(values, "augment"), gan_cfg.batch_size, subsystem_seed(values["seed"], "data"),
                         values["preproc.background_threshold"])
    return index, gan_cfg, stream


def cmd_train_gan(values, args):
    index, gan_cfg, stream = _gan_setup(values)
    _echo(values, ("gan", "model", "augment", "paths"))
    model = section(values, "model")
    out = _out(values, "gan")
    report = train_gan(gan_cfg, stream, None, out, model.widths, model.latent_dim)
    print(f"generator steps {report.generator_steps}, critic steps {report.critic_steps}; wrote {out}")


def cmd_track_gan_detection(values, args):
    index, gan_cfg, stream = _gan_setup(values)
    _echo(values, ("gan", "model", "augment", "paths"))
    model = section(values, "model")
    out = _out(values, "gan_tracking")
    report = train_gan(gan_cfg, stream, index, out, model.widths, model.latent_dim)
    for r in report.records:
        print(f"epoch {r.epoch}: APCER {r.apcer:.4f} BPCER {r.bpcer:.4f} ACER {r.acer:.4f}")
    print(f"wrote {out / 'detection_per_epoch.csv'}")


def _gan_dir(values, args):
    return Path(args.gan_dir) if args.gan_dir else Path(values["paths.out_dir"]) / "gan"


def cmd_sample(values, args):
    gen = load_checkpoint(args.generator or _gan_dir(values, args) / "generator")
    out = _out(values, "diagnostics")
    seed = subsystem_seed(values["seed"], "sampling")
    patches = sample_patches(gen, args.n, seed, out / "samples_grid.png")
    result = {"n": args.n, "min": float(patches.min()), "max": float(patches.max())}
    root = Path(values["paths.data_root"])
    if root.is_dir():
        index = scan_dataset(root, verify=False)
        real = np.concatenate([eval_patches(load_image(p)) for p in index.paths("train", BONA_FIDE)[:64]])
        result["diversity"] = mode_collapse_score(gen, max(args.n, 2), seed, real).to_json()
    _merge_json(out / "diagnostics.json", {"samples": result})
    print(json.dumps(result, indent=2))


def _merge_json(path, data):
    current = json.loads(path.read_text()) if path.exists() else {}
    current.update(data)
    _write_json(path, current)


def cmd_interpolate(values, args):
    gen = load_checkpoint(args.generator or _gan_dir(values, args) / "generator")
    out = _out(values, "diagnostics")
    rng = np.random.default_rng(subsystem_seed(values["seed"], "sampling"))
    z0, z1 = rng.standard_normal((2, gen.latent_dim))
    trace = latent_interpolation(gen, z0, z1, args.steps, out / "interpolation_strip.png")
    _merge_json(out / "diagnostics.json", {"interpolation": trace.to_json()})
    print(json.dumps(trace.to_json(), indent=2))


def _transplanted_ae(gan_dir: Path, seed):
    meta = read_manifest(gan_dir / "critic")["metadata"]
    ae = build_autoencoder("transfer_shape", meta["loss_mode"], meta["widths"], seed=seed)
    return transplant(gan_dir / "critic", gan_dir / "generator", ae, seed=seed)


def cmd_transfer(values, args):
    gan_dir = _gan_dir(values, args)
    ae = _transplanted_ae(gan_dir, subsystem_seed(values["seed"], "init"))
    out = _out(values, "transfer")
    save_checkpoint(ae, out / "ae", seed=values["seed"], epoch=0)
    report = verify_transplant(load_checkpoint(gan_dir / "critic"), load_checkpoint(gan_dir / "generator"), ae,
                               probe_seed=subsystem_seed(values["seed"], "probe") % 2**31)
    report.save(out / "transplant_report.json")
    print(json.dumps(report.to_json(), indent=2))
    if not report.passed:
        print("gan-pad transfer: transplanted segments deviate from their sources", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def cmd_train_ae(values, args):
    index = scan_dataset(values["paths.data_root"])
    ae_cfg = section(values, "ae", seed=values["seed"])
    init_seed = subsystem_seed(values["seed"], "init")
    out = _out(values, "ae")
    if args.from_scratch:
        model = section(values, "model")
        ae = build_autoencoder("scratch", "wgan_gp", model.widths, seed=init_seed)
    else:
        ae = _transplanted_ae(Path(args.from_gan), init_seed)
    _echo(values, ("ae", "augment", "paths"))
    print(f"autoencoder variant: {ae.source}")
    stream = TrainStream(index, section(values, "augment"), ae_cfg.batch_size,
                         subsystem_seed(values["seed"], "data"), values["preproc.background_threshold"])
    report = finetune_ae(ae, ae_cfg, stream, index if ae_cfg.track_validation else None, out)
    save_checkpoint(ae, out / "model", seed=values["seed"], epoch=ae_cfg.epochs)
    last = report.records[-1]
    print(f"final train loss {last.train_loss:.6g}; wrote {out}")


def _ae_path(values, args):
    return Path(args.ae) if args.ae else Path(values["paths.out_dir"]) / "ae" / "model"


def cmd_calibrate(values, args):
    ae = load_checkpoint(_ae_path(values, args))
    index = scan_dataset(values["paths.data_root"])
    model, records = calibrate_model(ae, index, values["preproc.background_threshold"])
    out = _out(values, "eval")
    _write_json(out / "threshold.json", model.to_json())
    print(json.dumps(model.to_json(), indent=2))


def cmd_evaluate(values, args):
    ae = load_checkpoint(_ae_path(values, args))
    index = scan_dataset(values["paths.data_root"])
    out = _out(values, "eval")
    threshold_path = Path(args.threshold) if args.threshold else out / "threshold.json"
    if not threshold_path.exists():
        raise errors.LayoutError(f"threshold file not found: {threshold_path} (run calibrate first)")
    model = ThresholdModel.from_json(json.loads(threshold_path.read_text()))
    report = evaluate_model(ae, model, index, out, values["preproc.background_threshold"])
    plot_det(report.det_points, out / "det.png", (report.apcer, report.bpcer))
    print(json.dumps(report.metrics(), indent=2))


def cmd_det(values, args):
    out = _out(values, "eval")
    scores = Path(args.scores) if args.scores else out / "scores.csv"
    if not scores.exists():
        raise errors.LayoutError(f"scores file not found: {scores}")
    points = det_curve(read_scores(scores))
    write_det(points, out / "det.csv")
    plot_det(points, out / "det.png")
    print(f"{len(points)} DET points written to {out / 'det.csv'}")


def cmd_verify(values, args):
    out = _out(values, "verify")
    result = {"gradient_checks": {}}
    probe = np.random.default_rng(0).uniform(-1, 1, size=(4, 64, 64, 1)).astype(np.float32)
    for source in ("transfer_shape", "scratch"):
        ae = _probe_init(build_autoencoder(source, "wgan_gp", (1, 1, 1, 1)), 0)
        result["gradient_checks"][f"reconstruction_{source}"] = loss_gradient_check(ae, probe)
    for mode in ("dcgan", "wgan_gp"):
        result["gradient_checks"][f"gan_{mode}"] = gan_gradient_check(mode)
    gan_dir = _gan_dir(values, args)
    if (gan_dir / "critic" / "manifest.json").exists():
        ae = _transplanted_ae(gan_dir, subsystem_seed(values["seed"], "init"))
        result["transplant"] = verify_transplant(load_checkpoint(gan_dir / "critic"),
                                                 load_checkpoint(gan_dir / "generator"), ae).to_json()
    _write_json(out / "verify.json", result)
    ok = all(r["passed"] for r in result["gradient_checks"].values())
    ok = ok and result.get("transplant", {"passed": True})["passed"]
    for name, r in result["gradient_checks"].items():
        print(f"{name}: max relative error {r['max_relative_error']:.3g} -> {'PASS' if r['passed'] else 'FAIL'}")
    if "transplant" in result:
        print(f"transplant: {'PASS' if result['transplant']['passed'] else 'FAIL'}")
    if not ok:
        print("gan-pad verify: at least one check failed, see verify.json", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


COMMANDS = {
    "synth-data": (cmd_synth_data, ("synth", "corpus", "paths"), "generate a synthetic corpus"),
    "train-gan": (cmd_train_gan, ("augment", "preproc", "model", "gan", "paths"), "adversarial pretraining"),
    "sample": (cmd_sample, ("paths",), "sample generator patches into a grid"),
    "interpolate": (cmd_interpolate, ("paths",), "latent interpolation strip and smoothness check"),
    "transfer": (cmd_transfer, ("paths",), "transplant GAN weights into an autoencoder"),
    "train-ae": (cmd_train_ae, ("augment", "preproc", "model", "ae", "paths"), "fine-tune an autoencoder"),
    "calibrate": (cmd_calibrate, ("preproc", "paths"), "threshold from bona fide training errors"),
    "evaluate": (cmd_evaluate, ("preproc", "paths"), "score validation images and compute error rates"),
    "det": (cmd_det, ("paths",), "DET curve from a scores file"),
    "track-gan-detection": (cmd_track_gan_detection, ("augment", "preproc", "model", "gan", "paths"),
                            "train a GAN and record critic-only detection rates per epoch"),
    "verify": (cmd_verify, ("paths",), "gradient checks and transplant verification"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gan-pad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = config_keys()
    for name, (_, sections, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", help="JSON file of flat dotted keys", default=None)
        p.add_argument("--seed", dest="seed", default=argparse.SUPPRESS,
                       help=f"root seed (default: {defaults['seed']})")
        for key, default in defaults.items():
            if key.split(".")[0] in sections:
                shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
                p.add_argument(f"--{key}", dest=key, default=argparse.SUPPRESS, help=f"(default: {shown})")
        if name in ("sample", "interpolate"):
            p.add_argument("--generator", help="generator checkpoint (default: <out_dir>/gan/generator)")
        if name in ("sample", "interpolate", "transfer", "verify"):
            p.add_argument("--gan-dir", help="GAN output directory (default: <out_dir>/gan)")
        if name == "sample":
            p.add_argument("--n", type=int, default=4, help="number of patches")
        if name == "interpolate":
            p.add_argument("--steps", type=int, default=8, help="frames along the latent path")
        if name == "train-ae":
            group = p.add_mutually_exclusive_group(required=True)
            group.add_argument("--from-scratch", action="store_true", help="train the from-scratch baseline")
            group.add_argument("--from-gan", metavar="GAN_DIR", help="GAN directory holding critic/ and generator/")
        if name in ("calibrate", "evaluate"):
            p.add_argument("--ae", help="autoencoder checkpoint (default: <out_dir>/ae/model)")
        if name == "evaluate":
            p.add_argument("--threshold", help="threshold JSON (default: <out_dir>/eval/threshold.json)")
        if name == "det":
            p.add_argument("--scores", help="scores CSV (default: <out_dir>/eval/scores.csv)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    keys = config_keys()
    overrides = {k: v for k, v in vars(args).items() if k in keys}
    func = COMMANDS[args.command][0]
    try:
        values = resolve_config(args.config, overrides)
        validate_config(values)
        code = func(values, args) or 0
    except errors.NonFiniteLoss as exc:
        print(f"gan-pad {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except errors.InvalidParams as exc:
        print(f"gan-pad {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (errors.GanPadError, OSError) as exc:
        print(f"gan-pad {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return code


if __name__ == "__main__":
    sys.exit(main())
