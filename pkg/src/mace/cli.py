"""Command-line entry point.

Every command reads one JSON config (``--config``), applies flag overrides,
writes the effective config next to its outputs and finishes by writing a
run manifest that lists every artifact.
"""

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .blackbox import ToyClassifier, TrainingError, toy_spec, train_toy_classifier
from .checkpoint import read_manifest
from .embedding import ConfigurationError
from .evaluator import (
    THRESHOLDS,
    ablation_compare,
    faithfulness_sweep,
    output_fidelity,
    rank_analytics,
    relevance_gap,
    robustness_sweep,
    stability_report,
    write_csv,
    write_json,
)
from .explainer import explain
from .model import MaceModel
from .pruning import PruneConfig, PruningError, prune_and_finetune
from .synthetic import class_names, generate_synthetic_dataset, load_dataset, save_dataset, split_dataset
from .trainer import TrainConfig, train

log = logging.getLogger("mace")

ENV_ROOT = "MACE_OUTPUT_ROOT"

DEFAULT_CONFIG = {
    "dataset": {"classes": 4, "per_class": 200, "seed": 0, "split": [0.6, 0.2, 0.2]},
    "blackbox": {"epochs": 30, "seed": 0, "tap_depth": 16, "dense_dim": 64, "min_accuracy": 0.9},
    "train": TrainConfig().to_dict(),
    "prune": asdict(PruneConfig()),
    "eval": {
        "thresholds": list(THRESHOLDS),
        "seed": 0,
        "fill": 0.0,
        "ablation_seeds": [0, 1, 2, 3, 4],
        "stability_images": 10,
        "stability_concepts": 5,
        "denominator": "positive",
    },
}


class CliError(RuntimeError):
    """A user-facing failure; reported without a traceback."""


@dataclass
class RunManifest:
    command: str
    argv: list
    config_path: str
    seeds: dict
    checkpoints: dict
    output_dir: str
    tool_version: str
    started: str
    finished: str = ""
    artifacts: list = field(default_factory=list)

    def write(self, path):
        self.finished = _now()
        self.artifacts.append(path)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        return path


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _version():
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        from . import __version__

        return __version__


def load_config(path=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            user = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    for section, values in user.items():
        if section not in cfg:
            raise CliError(f"unknown config section {section!r}")
        unknown = set(values) - set(cfg[section])
        if unknown:
            raise CliError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
        cfg[section].update(values)
    return cfg


def _override(section, **flags):
    for key, value in flags.items():
        if value is not None:
            section[key] = value


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise CliError(f"output directory {path} is not writable: {exc}") from exc
    return path


class Run:
    """Bookkeeping for one command: output dir, effective config, artifacts."""

    def __init__(self, args, cfg, command, outdir):
        self.args = args
        self.cfg = cfg
        self.outdir = _ensure_dir(outdir)
        self.manifest = RunManifest(
            command=command,
            argv=list(getattr(args, "argv", [])),
            config_path=os.path.abspath(args.config) if args.config else "",
            seeds={},
            checkpoints={},
            output_dir=os.path.abspath(self.outdir),
            tool_version=_version(),
            started=_now(),
        )
        self.tag = command.replace(" ", "-")

    def path(self, name):
        return os.path.join(self.outdir, name)

    def wrote(self, *paths):
        self.manifest.artifacts.extend(paths)
        return paths[0] if len(paths) == 1 else paths

    def finish(self):
        cfg_path = self.path(f"config-{self.tag}.json")
        with open(cfg_path, "w") as fh:
            json.dump(self.cfg, fh, indent=2, sort_keys=True)
        self.wrote(cfg_path)
        self.manifest.write(self.path(f"manifest-{self.tag}.json"))
        return 0


def output_root(args):
    return args.root or os.environ.get(ENV_ROOT) or "mace-output"


def run_dir(args):
    return args.run or os.path.join(output_root(args), "run")


# -- dataset ---------------------------------------------------------------

def dataset_path(root, ds):
    return os.path.join(root, "datasets", f"synthetic_c{ds['classes']}_n{ds['per_class']}_s{ds['seed']}.npz")


def ensure_dataset(root, ds):
    """Generate and cache the dataset; returns (path, images, cache_hit)."""
    path = dataset_path(root, ds)
    meta = {"classes": ds["classes"], "per_class": ds["per_class"], "seed": ds["seed"],
            "class_names": class_names(ds["classes"])}
    if os.path.exists(path):
        images, stored = load_dataset(path)
        if {k: stored.get(k) for k in meta} == meta:
            return path, images, True
    _ensure_dir(os.path.dirname(path))
    images = generate_synthetic_dataset(ds["classes"], ds["per_class"], ds["seed"])
    save_dataset(path, images, meta)
    return path, images, False


def _splits(images, ds):
    if len(ds["split"]) != 3:
        raise CliError("dataset.split must list train, prune and eval fractions")
    return split_dataset(images, tuple(ds["split"]), ds["seed"])


def cmd_dataset(args, cfg, parser):
    ds = cfg["dataset"]
    _override(ds, classes=args.classes, per_class=args.per_class, seed=args.seed)
    if args.classes is None and args.config is None:
        parser.error("the following arguments are required: --classes")
    if args.per_class is None and args.config is None:
        parser.error("the following arguments are required: --per-class")
    root = output_root(args)
    run = Run(args, cfg, "dataset", os.path.join(root, "datasets"))
    path, images, hit = ensure_dataset(root, ds)
    counts = np.bincount([im.label for im in images], minlength=ds["classes"])
    print(f"{'cache hit' if hit else 'generated'}: {path}")
    print(f"{len(images)} images, {ds['classes']} classes: "
          + ", ".join(f"{n}={c}" for n, c in zip(class_names(ds["classes"]), counts)))
    run.manifest.seeds = {"dataset": ds["seed"]}
    run.manifest.checkpoints = {"dataset": path}
    run.manifest.artifacts.append(path)
    run.tag = f"dataset-c{ds['classes']}-n{ds['per_class']}-s{ds['seed']}"
    return run.finish()


# -- shared loading ----------------------------------------------------------

def _load_images(args, cfg):
    if getattr(args, "dataset", None):
        if not os.path.exists(args.dataset):
            raise CliError(f"dataset {args.dataset} does not exist")
        images, meta = load_dataset(args.dataset)
        cfg["dataset"].update({k: meta[k] for k in ("classes", "per_class", "seed") if k in meta})
        return args.dataset, images
    path, images, _ = ensure_dataset(output_root(args), cfg["dataset"])
    return path, images


def _blackbox_path(args):
    return getattr(args, "blackbox", None) or os.path.join(run_dir(args), "blackbox.npz")


def _load_blackbox(args):
    path = _blackbox_path(args)
    if not os.path.exists(path):
        raise CliError(f"black-box checkpoint {path} not found; run `mace train` first")
    return path, ToyClassifier.load(path)


def _checkpoint(args, prefer_pruned=True):
    if args.checkpoint:
        path = args.checkpoint
    else:
        pruned = os.path.join(run_dir(args), "mace_pruned.npz")
        path = pruned if prefer_pruned and os.path.exists(pruned) else os.path.join(run_dir(args), "mace.npz")
    if not os.path.exists(path):
        raise CliError(f"checkpoint {path} not found")
    return path


def _load_model(path, require_trained=False):
    try:
        manifest = read_manifest(path)
    except Exception as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("kind") != "mace":
        raise CliError(f"{path} is not a MACE checkpoint")
    if require_trained and not manifest.get("trained_epochs"):
        raise CliError(f"checkpoint {path} has not been trained; run `mace train` first")
    model, manifest = MaceModel.load(path)
    return model, manifest


# -- train -----------------------------------------------------------------

def cmd_train(args, cfg, parser):
    t = cfg["train"]
    _override(t, seed=args.seed, epochs=args.epochs, num_concepts=args.num_concepts,
              batch_size=args.batch_size, learning_rate=args.lr, relevance_loss_mode=args.relevance_loss)
    if args.no_lo:
        t["use_lo"] = False
    if args.no_ld:
        t["use_ld"] = False
    config = TrainConfig.from_dict(t)
    cfg["train"] = config.to_dict()

    run = Run(args, cfg, "train", run_dir(args))
    data_path, images = _load_images(args, cfg)
    tr, _, ev = _splits(images, cfg["dataset"])

    bb_path = _blackbox_path(args)
    b = cfg["blackbox"]
    if os.path.exists(bb_path):
        bb = ToyClassifier.load(bb_path)
        print(f"black box: reusing {bb_path} (held-out accuracy {bb.accuracy:.3f})")
    else:
        spec = toy_spec(cfg["dataset"]["classes"], b["tap_depth"], b["dense_dim"])
        bb = train_toy_classifier(tr, b["epochs"], b["seed"], heldout=ev, spec=spec,
                                  min_accuracy=b["min_accuracy"])
        bb.save(bb_path)
        run.wrote(bb_path)
        print(f"black box: trained, held-out accuracy {bb.accuracy:.3f}")

    model, report = train(bb, tr, config)
    ckpt = run.path("mace.npz")
    model.save(ckpt, {"trained_epochs": config.epochs, "train_config": config.to_dict(),
                      "dataset": os.path.abspath(data_path), "blackbox": os.path.abspath(bb_path)})
    report_json, report_csv = run.path("train_report.json"), run.path("train_report.csv")
    report.to_json(report_json)
    report.to_csv(report_csv)
    run.wrote(ckpt, report_json, report_csv)
    totals = report.totals
    if totals:
        print(f"mean total loss: epoch 1 {totals[0]:.3f} -> final {totals[-1]:.3f}")
    run.manifest.seeds = {"dataset": cfg["dataset"]["seed"], "blackbox": b["seed"], "train": config.seed}
    run.manifest.checkpoints = {"blackbox": bb_path, "mace": ckpt, "dataset": data_path}
    return run.finish()


# -- prune -----------------------------------------------------------------

def cmd_prune(args, cfg, parser):
    p = cfg["prune"]
    _override(p, fine_tune_epochs=args.fine_tune_epochs, mask_threshold=args.mask_threshold)
    prune_config = PruneConfig(**p)
    ckpt = _checkpoint(args, prefer_pruned=False)
    model, manifest = _load_model(ckpt, require_trained=True)
    train_config = TrainConfig.from_dict(manifest.get("train_config", cfg["train"]))
    cfg["train"] = train_config.to_dict()
    bb_path, bb = _load_blackbox(args)
    run = Run(args, cfg, "prune", run_dir(args))
    data_path, images = _load_images(args, cfg)
    tr, pr, _ = _splits(images, cfg["dataset"])
    pruned, report, ft = prune_and_finetune(model, bb, tr, pr, prune_config, train_config)
    out = run.path("mace_pruned.npz")
    pruned.save(out, {"trained_epochs": manifest.get("trained_epochs", 0) + prune_config.fine_tune_epochs,
                      "train_config": train_config.to_dict(), "prune_config": asdict(prune_config),
                      "pruned_from": os.path.abspath(ckpt), "dataset": os.path.abspath(data_path)})
    rj, rt, fj = run.path("prune_report.json"), run.path("prune_report.txt"), run.path("finetune_report.json")
    report.to_json(rj)
    with open(rt, "w") as fh:
        fh.write(report.table() + "\n")
    ft.to_json(fj)
    run.wrote(out, rj, rt, fj)
    print(report.table())
    print(f"pruned {report.num_pruned} concepts; kept per class: {pruned.concept_counts}")
    run.manifest.seeds = {"train": train_config.seed}
    run.manifest.checkpoints = {"input": ckpt, "pruned": out, "blackbox": bb_path}
    return run.finish()


# -- explain ---------------------------------------------------------------

def cmd_explain(args, cfg, parser):
    ckpt = _checkpoint(args)
    model, _ = _load_model(ckpt)
    bb_path, bb = _load_blackbox(args)
    _, images = _load_images(args, cfg)
    by_id = {im.image_id: im for im in images}
    if args.image not in by_id:
        raise CliError(f"image id {args.image} not in dataset (0..{len(images) - 1})")
    image = by_id[args.image]
    if args.cls is None:
        k = int(bb.forward_tap(image.pixels).probs.argmax())
    else:
        try:
            k = bb.spec.class_index(int(args.cls) if args.cls.isdigit() else args.cls)
        except (KeyError, IndexError, ValueError) as exc:
            raise CliError(f"unknown class {args.cls!r}; choose from {bb.spec.class_names}") from exc
    if not 0 < args.threshold < 1:
        raise CliError("--threshold must lie in (0, 1)")
    bundle = explain(model, bb, image, k, args.threshold, image.image_id)
    outdir = args.out or os.path.join(run_dir(args), "explanations", f"{image.image_id}_{bundle.class_name}")
    run = Run(args, cfg, "explain", outdir)
    run.wrote(*bundle.save(outdir, image.pixels))
    print(f"image {image.image_id}: class {bundle.class_name} p={bundle.probability:.3f}, "
          f"{len(bundle.positive)}/{len(bundle.concepts)} concepts with positive relevance -> {outdir}")
    run.manifest.checkpoints = {"mace": ckpt, "blackbox": bb_path}
    run.tag = f"explain-{image.image_id}-{bundle.class_name}"
    return run.finish()


# -- eval ------------------------------------------------------------------

def _eval_setup(args, cfg):
    e = cfg["eval"]
    _override(e, seed=args.seed)
    if getattr(args, "thresholds", None):
        e["thresholds"] = args.thresholds
    if any(not 0 < t < 1 for t in e["thresholds"]):
        raise CliError("thresholds must lie in (0, 1)")
    _, images = _load_images(args, cfg)
    tr, pr, ev = _splits(images, cfg["dataset"])
    run = Run(args, cfg, f"eval {args.what}", os.path.join(run_dir(args), "eval"))
    return run, e, tr, pr, ev


def cmd_eval(args, cfg, parser):
    what = args.what
    if what == "ablation":
        return _eval_ablation(args, cfg)
    ckpt = _checkpoint(args)
    model, _ = _load_model(ckpt)
    bb_path, bb = _load_blackbox(args)
    run, e, _, _, ev = _eval_setup(args, cfg)
    run.manifest.checkpoints = {"mace": ckpt, "blackbox": bb_path}
    run.manifest.seeds = {"eval": e["seed"]}
    base = run.path(what)
    if what == "faithfulness":
        if args.fill == "mean":
            e["fill"] = np.mean([im.pixels for im in ev], axis=(0, 1, 2)).tolist()
        elif args.fill == "zero":
            e["fill"] = 0.0
        rep = faithfulness_sweep(model, bb, ev, tuple(e["thresholds"]), e["seed"], e["fill"])
        rep.to_csv(base + ".csv")
        rep.to_json(base + ".json")
        run.wrote(base + ".csv", base + ".json")
        for row in rep.summary():
            print(f"t={row['threshold']:.1f}  mace {row['mace']:.4f}  random {row['random']:.4f}")
        if args.plot:
            from .plots import plot_faithfulness

            run.wrote(plot_faithfulness(rep, base + ".png"))
    elif what == "robustness":
        rep = robustness_sweep(model, bb, ev, thresholds=tuple(e["thresholds"]), seed=e["seed"])
        rep.to_csv(base + ".csv")
        rep.to_json(base + ".json")
        run.wrote(base + ".csv", base + ".json")
        for row in rep.rows:
            print(f"{row['perturbation']:>14} {row['intensity']:+.2f} t={row['threshold']:.1f} "
                  f"IoU {row['mean_iou']:.3f}")
        if args.plot:
            from .plots import plot_robustness

            t = 0.5 if 0.5 in e["thresholds"] else e["thresholds"][0]
            run.wrote(plot_robustness(rep, base + ".png", t))
    elif what == "stability":
        rows = stability_report(model, bb, ev, e["stability_images"], e["stability_concepts"], e["seed"])
        flat = [{k: v for k, v in r.items() if k != "matrix"} for r in rows]
        write_csv(base + ".csv", flat)
        write_json(base + ".json", {"classes": rows})
        run.wrote(base + ".csv", base + ".json")
        for r in flat:
            print(f"class {r['class']}: intra {r['intra_mean']:.3f}  inter {r['inter_mean']:.3f}  "
                  f"diag block {r['diag_block_mean']:.3f}  off block {r['off_block_mean']:.3f}")
    elif what == "relevance":
        denominator = args.denominator or e["denominator"]
        e["denominator"] = denominator
        labels = None
        if args.shuffle_labels is not None:
            labels = np.random.default_rng(args.shuffle_labels).permutation([im.label for im in ev])
        rep = rank_analytics(model, bb, ev, denominator, labels)
        rep.to_csv(base + ".csv")
        rep.to_json(base + ".json")
        frac, gap = relevance_gap(rep)
        agree, kl = output_fidelity(model, bb, ev)
        summary = base + "_summary.json"
        write_json(summary, {"fraction_true_above_others": frac, "mean_gap": gap,
                             "shuffled_labels_seed": args.shuffle_labels,
                             "output_argmax_agreement": agree, "output_mean_kl": kl})
        run.wrote(base + ".csv", base + ".json", summary)
        for row in rep.ranks:
            print(f"rank {row['rank']}: {row['mean_percentage']:.1f}%")
        print(f"AVG True > AVG Others for {frac:.0%} of concepts (mean gap {gap:.3f}); "
              f"output agreement {agree:.3f}, KL {kl:.4f}")
    return run.finish()


def _eval_ablation(args, cfg):
    bb_path, bb = _load_blackbox(args)
    run, e, tr, pr, ev = _eval_setup(args, cfg)
    if args.seeds:
        e["ablation_seeds"] = args.seeds
    config = TrainConfig.from_dict(cfg["train"])
    prune_images = None if args.no_prune else pr
    rep = ablation_compare(bb, tr, ev, config, e["ablation_seeds"], tuple(e["thresholds"]),
                           prune_images=prune_images, prune_config=PruneConfig(**cfg["prune"]))
    base = run.path("ablation")
    rep.to_csv(base + ".csv")
    rep.to_json(base + ".json")
    run.wrote(base + ".csv", base + ".json")
    for row in rep.means():
        print("t={:.1f} ".format(row["threshold"]) + "  ".join(f"{k} {v:.4f}" for k, v in row.items()
                                                              if k != "threshold"))
    run.manifest.seeds = {"ablation": list(e["ablation_seeds"])}
    run.manifest.checkpoints = {"blackbox": bb_path}
    return run.finish()


# -- parser ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="mace", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config file; flags override its fields")
    parser.add_argument("--root", help=f"output root (default: ${ENV_ROOT} or ./mace-output)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_run(p):
        p.add_argument("--run", help="run directory (default: <root>/run)")
        p.add_argument("--dataset", help="cached dataset archive (default: generated from config)")
        p.add_argument("--blackbox", help="black-box checkpoint (default: <run>/blackbox.npz)")
        return p

    p = sub.add_parser("dataset", help="generate and cache the synthetic dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_dataset)

    p = with_run(sub.add_parser("train", help="train the toy black box (if absent) and MACE"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--num-concepts", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--relevance-loss", choices=("full-bce", "literal"))
    p.add_argument("--no-lo", action="store_true", help="drop the output-divergence term")
    p.add_argument("--no-ld", action="store_true", help="drop the dense-reconstruction term")
    p.set_defaults(func=cmd_train)

    p = with_run(sub.add_parser("prune", help="prune non-meaningful concepts and fine-tune"))
    p.add_argument("--checkpoint", help="MACE checkpoint (default: <run>/mace.npz)")
    p.add_argument("--fine-tune-epochs", type=int)
    p.add_argument("--mask-threshold", type=float)
    p.set_defaults(func=cmd_prune)

    p = with_run(sub.add_parser("explain", help="write concept overlays for one image"))
    p.add_argument("--checkpoint")
    p.add_argument("--image", type=int, required=True, help="image id")
    p.add_argument("--class", dest="cls", help="class name or index (default: predicted)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="bundle directory")
    p.set_defaults(func=cmd_explain)

    p = with_run(sub.add_parser("eval", help="quantitative evaluations"))
    p.add_argument("what", choices=("faithfulness", "robustness", "stability", "relevance", "ablation"))
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--plot", action="store_true", help="also write a PNG curve")
    p.add_argument("--fill", choices=("zero", "mean"), help="masked-pixel fill (default: config eval.fill)")
    p.add_argument("--denominator", choices=("positive", "all"))
    p.add_argument("--shuffle-labels", type=int, metavar="SEED", help="null check with permuted labels")
    p.add_argument("--seeds", type=int, nargs="+", help="ablation seeds")
    p.add_argument("--no-prune", action="store_true", help="ablation without pruning")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg, parser)
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
    except (CliError, PruningError, ConfigurationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
