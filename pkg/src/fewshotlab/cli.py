"""Experiment runner.

Subcommands: pretrain, meta-train, embed, eval, cross-eval, report,
synth-data. Configuration is a flat key=value text file with dotted sections
(e.g. trainer.lr=0.05), overridable with repeated --set flags; a few common
protocol flags (--aux, --vote, --trials, --episodes) are exposed directly.

Exit codes: 0 success, 2 usage/config error, 3 incompatibility, 4 runtime
failure.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .adapt import AuxAugmentation, AuxMode, ProbeConfig, fit_probe, predict_task, vote_loc5, vote_none, vote_rot4
from .backbones import Arch, BackboneConfig, save_checkpoint
from .cache import read_embedding_cache, write_embedding_cache
from .data import (
    ResolutionMode,
    SyntheticShapesConfig,
    generate_synthetic,
    load_dataset,
    make_splits,
    read_manifest,
    write_manifest,
    write_split,
)
from .errors import (
    ConfigError,
    FewShotError,
    IncompatibleScheme,
    IncompatibleTasks,
)
from .evaluate import (
    Embedder,
    EvalProtocol,
    REPORT_CSV_COLUMNS,
    cross_eval_matrix,
    report_csv_row,
    run_episodic_eval,
)
from .meta import MetaConfig, meta_train
from .pretext import TaskKind
from .rng import stream
from .trainer import CopyMode, TaskWeights, TrainConfig, select_checkpoint, train_representation

DATA_ROOT_ENV = "FEWSHOT_DATA_ROOT"

METHOD_TASKS = {
    "supervised": {TaskKind.CLS},
    "rot": {TaskKind.ROT},
    "loc4": {TaskKind.LOC4},
    "loc5": {TaskKind.LOC5},
    "contrast": {TaskKind.CONTRAST},
}


# --------------------------------------------------------------------------
# flat key=value configuration
# --------------------------------------------------------------------------

def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


class ExperimentConfig:
    """Resolved flat configuration with typed accessors."""

    def __init__(self, values):
        self.values = dict(values)
        self.consumed = set()

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {}
        if path is not None:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path, encoding="utf-8") as f:
                values.update(parse_config_text(f.read()))
        for item in overrides:
            values.update(parse_config_text(item))
        return cls(values)

    def get(self, key, default=None, cast=str):
        self.consumed.add(key)
        if key not in self.values:
            return default
        raw = self.values[key]
        try:
            if cast is bool:
                return raw.lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key}={raw!r}: {exc}") from exc

    def get_ints(self, key, default=()):
        raw = self.get(key)
        if raw is None or raw == "":
            return tuple(default)
        return tuple(int(v) for v in raw.split(","))

    def hash(self):
        canon = "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def build_dataset(cfg):
    kind = cfg.get("dataset.kind", "synthetic")
    if kind == "synthetic":
        shapes = cfg.get("dataset.synthetic.shapes")
        scfg = SyntheticShapesConfig(
            n_classes=cfg.get("dataset.synthetic.n_classes", 24, int),
            images_per_class=cfg.get("dataset.synthetic.images_per_class", 60, int),
            image_size=cfg.get("dataset.synthetic.image_size", 32, int),
            seed=cfg.get("dataset.synthetic.seed", 0, int),
            band_prob=cfg.get("dataset.synthetic.band_prob", 0.0, float),
            **({"shapes": tuple(shapes.split(","))} if shapes else {}),
        )
        return load_dataset(generate_synthetic(scfg))
    if kind == "manifest":
        manifest = cfg.get("dataset.manifest")
        if manifest is None:
            raise ConfigError("dataset.kind=manifest requires dataset.manifest=<path>")
        root = cfg.get("dataset.root") or os.environ.get(DATA_ROOT_ENV)
        if not os.path.exists(manifest):
            raise ConfigError(f"dataset manifest not found: {manifest}")
        mode = cfg.get("dataset.resolution_mode", "resized")
        mode = {"resized": ResolutionMode.RESIZED_84, "random_crop": ResolutionMode.RANDOM_CROP_84}.get(mode)
        if mode is None:
            raise ConfigError("dataset.resolution_mode must be resized or random_crop")
        return load_dataset(read_manifest(manifest, mode, name=cfg.get("dataset.name"), root=root))
    raise ConfigError(f"unknown dataset.kind {kind!r}")


def build_backbone_config(cfg):
    arch_name = cfg.get("backbone.arch", "convnet4")
    try:
        arch = Arch(arch_name)
    except ValueError as exc:
        raise ConfigError(f"unknown backbone.arch {arch_name!r}") from exc
    widths = cfg.get_ints("backbone.widths") or None
    return BackboneConfig(
        arch=arch,
        input_size=cfg.get("backbone.input_size", 84, int),
        widths=widths,
    )


def build_train_config(cfg, method):
    if method == "multitask":
        raw = cfg.get("trainer.tasks")
        if not raw:
            raise ConfigError("method=multitask requires trainer.tasks=cls+rot style value")
        try:
            tasks = {TaskKind(t) for t in raw.split("+")}
        except ValueError as exc:
            raise ConfigError(f"trainer.tasks {raw!r}: {exc}") from exc
    elif method in METHOD_TASKS:
        tasks = METHOD_TASKS[method]
    else:
        raise ConfigError(
            f"unknown method {method!r}; expected one of "
            f"{sorted(METHOD_TASKS) + ['multitask', 'anil']}"
        )
    copy_mode = {"all": CopyMode.ALL_COPIES, "sampled": CopyMode.SAMPLED}.get(
        cfg.get("trainer.copy_mode", "all")
    )
    if copy_mode is None:
        raise ConfigError("trainer.copy_mode must be all or sampled")
    epochs = cfg.get("trainer.epochs", 100, int)
    decay = cfg.get_ints("trainer.decay_epochs", (60, 80))
    decay = tuple(e for e in decay if e < epochs)
    batch = cfg.get("trainer.batch_size", None, int)
    return TrainConfig(
        tasks=tasks,
        weights=TaskWeights(
            lambda_rot=cfg.get("trainer.lambda_rot", 1.0, float),
            lambda_loc=cfg.get("trainer.lambda_loc", 1.0, float),
        ),
        lr=cfg.get("trainer.lr", 0.05, float),
        epochs=epochs,
        batch_size=batch,
        decay_epochs=decay,
        decay_factor=cfg.get("trainer.decay_factor", 0.1, float),
        copy_mode=copy_mode,
    )


def build_meta_config(cfg):
    val_part = cfg.get("meta.val_partition", "val")
    return MetaConfig(
        n_way=cfg.get("meta.n_way", 5, int),
        k_shot=cfg.get("meta.k_shot", 1, int),
        alpha=cfg.get("meta.alpha", None, float),
        beta=cfg.get("meta.beta", 0.001, float),
        inner_steps_train=cfg.get("meta.inner_steps_train", 5, int),
        inner_steps_eval=cfg.get("meta.inner_steps_eval", 10, int),
        task_batch=cfg.get("meta.task_batch", 4, int),
        epochs=cfg.get("meta.epochs", 400, int),
        episodes_per_epoch=cfg.get("meta.episodes_per_epoch", 100, int),
        query_per_class=cfg.get("meta.query_per_class", 15, int),
        val_episodes=cfg.get("meta.val_episodes", 200, int),
        val_partition=tuple(val_part.split(",")) if "," in val_part else val_part,
    )


def parse_aux_flag(text):
    if text in (None, "", "none"):
        return AuxAugmentation()
    kind, _, count = text.partition(":")
    if kind == "random":
        return AuxAugmentation(mode=AuxMode.RANDOM_TOTAL, total_count=int(count or 1000))
    if kind == "per_class":
        return AuxAugmentation(mode=AuxMode.PER_CLASS, per_class_count=int(count or 1))
    raise ConfigError(f"--aux expects none, random:N, or per_class:N; got {text!r}")


def parse_vote_flag(text):
    votes = {"none": vote_none, "rot4": vote_rot4, "loc5": vote_loc5}
    if text in (None, ""):
        return vote_none()
    if text not in votes:
        raise ConfigError(f"--vote expects one of {sorted(votes)}; got {text!r}")
    return votes[text]()


def build_protocol(cfg, args):
    part = cfg.get("eval.partition", "test")
    aux = parse_aux_flag(args.aux if args.aux is not None else cfg.get("eval.aux", "none"))
    vote = parse_vote_flag(args.vote if args.vote is not None else cfg.get("eval.vote", "none"))
    return EvalProtocol(
        n_way=cfg.get("eval.n_way", 5, int),
        k_shot=cfg.get("eval.k_shot", 1, int),
        query_per_class=cfg.get("eval.query_per_class", 15, int),
        episodes_per_trial=args.episodes or cfg.get("eval.episodes", 600, int),
        trials=args.trials or cfg.get("eval.trials", 5, int),
        aux=aux,
        vote=vote,
        probe=ProbeConfig(l2_coeff=cfg.get("eval.probe_l2", 1e-3, float)),
        seed=cfg.get("eval.seed", cfg.get("seed", 0, int), int),
        partition=tuple(part.split(",")) if "," in part else part,
        support_augment=cfg.get("eval.support_augment", 5, int),
    )


# --------------------------------------------------------------------------
# run manifest
# --------------------------------------------------------------------------

def atomic_write_text(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunManifest:
    """Written before the run starts, finalized once, immutable afterwards."""

    def __init__(self, out_dir, command, cfg, seeds):
        self.path = os.path.join(out_dir, "manifest.json")
        self.body = {
            "command": command,
            "code_version": __version__,
            "config_hash": cfg.hash(),
            "config": dict(cfg.values),
            "seeds": seeds,
            "status": "running",
            "started_unix": time.time(),
            "artifacts": [],
        }
        atomic_write_text(self.path, json.dumps(self.body, indent=2, sort_keys=True))

    def finalize(self, artifacts, extra=None):
        self.body["status"] = "done"
        self.body["artifacts"] = sorted(artifacts)
        self.body["wall_clock_s"] = time.time() - self.body["started_unix"]
        if extra:
            self.body.update(extra)
        atomic_write_text(self.path, json.dumps(self.body, indent=2, sort_keys=True))
        return self.path


def _out_dir(cfg, args):
    out = args.out or cfg.get("out_dir")
    if not out:
        raise ConfigError("an output directory is required (--out or out_dir=...)")
    os.makedirs(out, exist_ok=True)
    return out


def _write_csv(path, rows):
    text = "\n".join(",".join(str(c) for c in row) for row in rows) + "\n"
    atomic_write_text(path, text)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_pretrain(cfg, args):
    method = cfg.get("method", "supervised")
    if method == "anil":
        raise ConfigError("method=anil is trained with the meta-train subcommand")
    train_cfg = build_train_config(cfg, method)
    dataset = build_dataset(cfg)
    backbone_cfg = build_backbone_config(cfg)
    seed = cfg.get("seed", 0, int)
    out = _out_dir(cfg, args)
    manifest = RunManifest(out, "pretrain", cfg, {"seed": seed})
    split = make_splits(dataset, cfg.get("split.seed", seed, int))
    split_path = os.path.join(out, "split.tsv")
    write_split(dataset, split, split_path)
    log_path = os.path.join(out, "train_log.csv")
    fe, records = train_representation(
        train_cfg, dataset, split, backbone_cfg, seed, out_dir=out, log_path=log_path
    )
    best = select_checkpoint(records)
    manifest.finalize(
        [split_path, log_path] + [r.path for r in records if r.path],
        extra={"best_checkpoint": best.path, "best_val_loss": best.val_loss},
    )
    print(best.path)
    return 0


def cmd_meta_train(cfg, args):
    dataset = build_dataset(cfg)
    backbone_cfg = build_backbone_config(cfg)
    meta_cfg = build_meta_config(cfg)
    seed = cfg.get("seed", 0, int)
    out = _out_dir(cfg, args)
    manifest = RunManifest(
        out, "meta-train", cfg,
        {"seed": seed, "alpha": meta_cfg.alpha, "beta": meta_cfg.beta},
    )
    split = make_splits(dataset, cfg.get("split.seed", seed, int))
    log_path = os.path.join(out, "meta_log.csv")
    fe, state, records = meta_train(
        meta_cfg, dataset, backbone_cfg, seed, split=split, log_path=log_path
    )
    best = select_checkpoint(records)
    path = save_checkpoint(
        fe, out, [f"anil{meta_cfg.n_way}w{meta_cfg.k_shot}s"], best.epoch, best.val_loss,
        extra={"mean_rgb": split.mean_rgb.tolist(), "std_rgb": split.std_rgb.tolist(),
               "seed": seed, "alpha": meta_cfg.alpha},
    )
    manifest.finalize([log_path, path], extra={"best_checkpoint": path})
    print(path)
    return 0


def cmd_embed(cfg, args):
    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    dataset = build_dataset(cfg)
    embedder = Embedder.from_checkpoint(args.checkpoint)
    part = tuple(args.partition.split(",")) if "," in args.partition else args.partition
    idxs = dataset.indices(part)
    if len(idxs) == 0:
        raise ConfigError(f"partition {args.partition!r} has no images")
    feats = embedder.embed_indices(dataset, idxs)
    out_path = args.out or f"{os.path.splitext(args.checkpoint)[0]}_{args.partition}.fseb"
    write_embedding_cache(out_path, feats, dataset.labels[idxs].astype(np.int32))
    print(out_path)
    return 0


def _eval_from_cache(cfg, args, protocol):
    if protocol.vote.kind.value != "none" or protocol.support_augment > 0:
        raise IncompatibleScheme(
            "cache-based evaluation has no images: voting and support "
            "augmentation require a checkpoint"
        )
    feats, ids = read_embedding_cache(args.cache)
    by_class = {}
    for i, c in enumerate(ids):
        by_class.setdefault(int(c), []).append(i)
    usable = {c: np.array(v) for c, v in by_class.items()
              if len(v) >= protocol.k_shot + protocol.query_per_class}
    if len(usable) < protocol.n_way:
        raise ConfigError(f"cache holds {len(usable)} usable classes, need {protocol.n_way}")
    n, k, q = protocol.n_way, protocol.k_shot, protocol.query_per_class
    trial_accs = []
    for t in range(protocol.trials):
        accs = []
        for e in range(protocol.episodes_per_trial):
            rng = stream(protocol.seed, "episode", t, e)
            classes = rng.choice(np.array(sorted(usable)), size=n, replace=False)
            Xs, ys, Xq, yq = [], [], [], []
            for lab, c in enumerate(classes):
                picks = rng.choice(usable[int(c)], size=k + q, replace=False)
                Xs.append(feats[picks[:k]])
                Xq.append(feats[picks[k:]])
                ys += [lab] * k
                yq += [lab] * q
            model = fit_probe(np.vstack(Xs), np.array(ys), protocol.aux, protocol.probe,
                              stream(protocol.seed, "aux", t, e))
            preds = predict_task(model, np.vstack(Xq))
            accs.append(float(np.mean(preds == np.array(yq))))
        trial_accs.append(accs)
    from .evaluate import EvalReport, aggregate_trials, episodic_ci, median_trial_index

    means = [float(np.mean(a)) for a in trial_accs]
    return EvalReport(
        trial_episode_acc=trial_accs,
        trial_means=means,
        reported_acc=aggregate_trials(means),
        ci_halfwidth=episodic_ci(trial_accs[median_trial_index(means)]),
        metadata=dict(
            representation_id=os.path.basename(args.cache), dataset="cache",
            n_way=n, k_shot=k, aux_mode=protocol.aux.describe(),
            vote_kind="none", trials=protocol.trials,
            episodes=protocol.episodes_per_trial, seed=protocol.seed, interval="ci95",
        ),
    )


def cmd_eval(cfg, args):
    protocol = build_protocol(cfg, args)
    out = _out_dir(cfg, args)
    manifest = RunManifest(out, "eval", cfg, {"seed": protocol.seed})
    if args.cache:
        report = _eval_from_cache(cfg, args, protocol)
    else:
        if not args.checkpoint or not os.path.exists(args.checkpoint):
            raise ConfigError(f"checkpoint not found: {args.checkpoint}")
        dataset = build_dataset(cfg)
        embedder = Embedder.from_checkpoint(args.checkpoint)
        split = make_splits(dataset, cfg.get("split.seed", cfg.get("seed", 0, int), int))
        report = run_episodic_eval(embedder, protocol, dataset, split, workers=args.workers)
    report_path = os.path.join(out, "report.csv")
    _write_csv(report_path, [REPORT_CSV_COLUMNS, report_csv_row(report)])
    trials_path = os.path.join(out, "trials.json")
    atomic_write_text(trials_path, json.dumps(
        dict(trial_means=report.trial_means, reported_acc=report.reported_acc,
             ci_halfwidth=report.ci_halfwidth, metadata=report.metadata), indent=2))
    manifest.finalize([report_path, trials_path])
    print(f"{report.metadata['representation_id']}: "
          f"{100 * report.reported_acc:.2f}({100 * report.ci_halfwidth:.2f})")
    return 0


def cmd_cross_eval(cfg, args):
    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    dataset = build_dataset(cfg)
    embedder = Embedder.from_checkpoint(args.checkpoint)
    split = make_splits(dataset, cfg.get("split.seed", cfg.get("seed", 0, int), int))
    out = _out_dir(cfg, args)
    manifest = RunManifest(out, "cross-eval", cfg, {"seed": cfg.get("seed", 0, int)})
    tasks = [TaskKind.CLS, TaskKind.ROT, TaskKind.LOC4]
    try:
        matrix = cross_eval_matrix({embedder.rep_id: embedder}, dataset, split, tasks)
    except IncompatibleTasks:
        tasks = [TaskKind.CLS, TaskKind.ROT]
        matrix = cross_eval_matrix({embedder.rep_id: embedder}, dataset, split, tasks)
    path = os.path.join(out, "cross_eval.csv")
    _write_csv(path, matrix.to_csv_rows())
    manifest.finalize([path])
    for t in tasks:
        print(f"{embedder.rep_id} -> {t.value}: {100 * matrix.cells[(embedder.rep_id, t)]:.2f}")
    return 0


def cmd_report(cfg, args):
    rows = []
    for path in args.inputs:
        if not os.path.exists(path):
            raise ConfigError(f"report csv not found: {path}")
        with open(path, encoding="utf-8") as f:
            lines = [l.strip().split(",") for l in f if l.strip()]
        header = tuple(lines[0])
        if header != REPORT_CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {header}")
        rows.extend(dict(zip(header, l)) for l in lines[1:])
    col_keys, table_rows = [], {}
    for r in rows:
        ck = (r["n_way"], r["k_shot"], r["aux_mode"], r["vote_kind"])
        if ck not in col_keys:
            col_keys.append(ck)
        table_rows.setdefault(r["representation_id"], {})[ck] = f"{r['acc_pct']}({r['ci95_pct']})"
    headers = ["representation"] + [
        f"{n}w{k}s" + (f"+aux[{a}]" if a != "none" else "") + (f"+vote[{v}]" if v != "none" else "")
        for n, k, a, v in col_keys
    ]
    table = [headers] + [
        [rid] + [cells.get(c, "-") for c in col_keys] for rid, cells in table_rows.items()
    ]
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    for row in table:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return 0


def cmd_synth_data(cfg, args):
    from PIL import Image

    dataset = build_dataset(cfg)
    out = _out_dir(cfg, args)
    manifest = RunManifest(out, "synth-data", cfg, {"seed": cfg.get("dataset.synthetic.seed", 0, int)})
    for rel, img in zip(dataset.rel_paths, dataset.images):
        path = os.path.join(out, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        Image.fromarray(img.transpose(1, 2, 0)).save(path)
    man_path = os.path.join(out, "manifest.tsv")
    write_manifest(dataset, man_path)
    manifest.finalize([man_path], extra={"images": len(dataset.images)})
    print(man_path)
    return 0


# --------------------------------------------------------------------------
# argument parsing and dispatch
# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="fewshotlab",
        description="few-shot representation transfer experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, default=1)
        if checkpoint:
            p.add_argument("--checkpoint", help="backbone checkpoint file")

    common(sub.add_parser("pretrain", help="supervised / pretext / multi-task pre-training"))
    common(sub.add_parser("meta-train", help="last-layer MAML (ANIL) meta-training"))

    p = sub.add_parser("embed", help="write an embedding cache for one partition")
    common(p, checkpoint=True)
    p.add_argument("--partition", default="test")

    p = sub.add_parser("eval", help="episodic evaluation with a linear probe")
    common(p, checkpoint=True)
    p.add_argument("--cache", help="evaluate from an embedding cache instead of images")
    p.add_argument("--aux", help="none | random:N | per_class:N")
    p.add_argument("--vote", help="none | rot4 | loc5")
    p.add_argument("--trials", type=int)
    p.add_argument("--episodes", type=int)

    common(sub.add_parser("cross-eval", help="holdout accuracy on cls/rot/loc tasks"),
           checkpoint=True)

    p = sub.add_parser("report", help="render report CSVs as an aligned table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], dest="overrides")

    common(sub.add_parser("synth-data", help="materialize the synthetic dataset to disk"))
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "cross-eval": cmd_cross_eval,
    "report": cmd_report,
    "synth-data": cmd_synth_data,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.load(getattr(args, "config", None), getattr(args, "overrides", ()))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IncompatibleTasks, IncompatibleScheme) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FewShotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
