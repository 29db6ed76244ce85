"""Episodic evaluation protocol and cross-task holdout matrices.

The headline number for a representation is the median over trials of the
per-trial mean accuracy across episodes; the reported interval is
1.96 * sd / sqrt(episodes) over the median trial's per-episode accuracies
(treated as a 95% confidence halfwidth and labeled ci95 in all outputs).
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import (
    AuxAugmentation,
    AuxMode,
    AuxPool,
    ProbeConfig,
    VoteKind,
    VoteScheme,
    fit_probe,
    predict_task,
    predict_vote,
    vote_none,
)
from .backbones import extract_features, load_checkpoint
from .errors import EmptyInput, IncompatibleScheme, IncompatibleTasks
from .imageops import normalize, to_float01
from .pretext import TaskKind
from .rng import stream
from .data import sample_episode


class Embedder:
    """Frozen backbone + its normalization statistics + a per-index cache."""

    def __init__(self, fe, mean_rgb, std_rgb, rep_id=""):
        self.fe = fe
        self.mean_rgb = np.asarray(mean_rgb, dtype=np.float64)
        self.std_rgb = np.asarray(std_rgb, dtype=np.float64)
        self.rep_id = rep_id
        self._cache = {}

    @classmethod
    def from_checkpoint(cls, path, rep_id=None):
        fe, meta = load_checkpoint(path)
        return cls(
            fe, meta["mean_rgb"], meta["std_rgb"],
            rep_id=rep_id or "+".join(meta.get("tasks", [])),
        )

    @property
    def input_size(self):
        return self.fe.config.input_size

    def embed_views(self, views, chunk=512):
        """float [B,3,S,S] views in [0,1] -> float32 [B, feature_dim]."""
        x = normalize(np.asarray(views, dtype=np.float32), self.mean_rgb, self.std_rgb)
        parts = [extract_features(self.fe, x[i : i + chunk]) for i in range(0, len(x), chunk)]
        return np.concatenate(parts) if len(parts) > 1 else parts[0]

    def embed_images(self, images):
        """Stored-format images (uint8 or float01) at model size -> features."""
        return self.embed_views(np.stack([to_float01(im) for im in images]))

    def embed_indices(self, dataset, idxs):
        """Eval-view features by dataset index, computed once and cached."""
        missing = [int(i) for i in idxs if int(i) not in self._cache]
        if missing:
            views = dataset.views(missing, self.input_size)
            feats = self.embed_views(views)
            for i, f in zip(missing, feats):
                self._cache[i] = f
        return np.stack([self._cache[int(i)] for i in idxs])


@dataclass
class EvalProtocol:
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15
    episodes_per_trial: int = 600
    trials: int = 5
    aux: AuxAugmentation = field(default_factory=AuxAugmentation)
    vote: VoteScheme = field(default_factory=vote_none)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    partition: object = "test"   # partition name or tuple of names
    support_augment: int = 5     # train-view copies per support image (0 = off)

    def __post_init__(self):
        if self.episodes_per_trial < 1 or self.trials < 1:
            raise EmptyInput("need at least one episode and one trial")


@dataclass
class EvalReport:
    trial_episode_acc: list      # per trial: list of per-episode accuracies
    trial_means: list
    reported_acc: float          # median of trial means
    ci_halfwidth: float          # 1.96 * sd / sqrt(episodes), median trial
    metadata: dict

    @property
    def per_episode_acc(self):
        """The median trial's per-episode accuracies (backs the CI)."""
        return self.trial_episode_acc[median_trial_index(self.trial_means)]


def aggregate_trials(trial_means):
    """Exact median; even counts average the two central values."""
    if len(trial_means) == 0:
        raise EmptyInput("no trial means to aggregate")
    s = sorted(float(v) for v in trial_means)
    m = len(s) // 2
    if len(s) % 2:
        return s[m]
    return (s[m - 1] + s[m]) / 2.0


def median_trial_index(trial_means):
    """Trial whose mean is closest to the reported median (ties: lowest index)."""
    med = aggregate_trials(trial_means)
    gaps = [abs(float(v) - med) for v in trial_means]
    return int(np.argmin(gaps))


def episodic_ci(per_episode_acc):
    """1.96 * sample sd / sqrt(n) over one trial's episode accuracies."""
    accs = np.asarray(per_episode_acc, dtype=np.float64)
    if len(accs) < 2:
        return 0.0
    return 1.96 * float(np.std(accs, ddof=1)) / math.sqrt(len(accs))


def _episode_accuracy(embedder, protocol, dataset, split, aux, trial, index):
    rng_ep = stream(protocol.seed, "episode", trial, index)
    ep = sample_episode(
        dataset, protocol.partition, protocol.n_way, protocol.k_shot,
        protocol.query_per_class, rng_ep,
    )
    return episode_accuracy(embedder, protocol, dataset, split, aux, ep, trial, index)


def episode_accuracy(embedder, protocol, dataset, split, aux, ep, trial, index):
    """Fit the probe on one episode's support (+ aux) and score its queries."""
    feats_s = embedder.embed_indices(dataset, ep.support_idx)
    y_s = ep.support_y
    if protocol.support_augment > 0:
        rng_sup = stream(protocol.seed, "support", trial, index)
        copies = []
        for _ in range(protocol.support_augment):
            views = dataset.views(
                ep.support_idx, embedder.input_size, train_time=True,
                rng=rng_sup, flip_prob=0.5,
            )
            copies.append(embedder.embed_views(views))
        feats_s = np.vstack([feats_s] + copies)
        y_s = np.concatenate([y_s] + [ep.support_y] * protocol.support_augment)

    if aux.fixed_draw:
        rng_aux = stream(protocol.seed, "aux")
    else:
        rng_aux = stream(protocol.seed, "aux", trial, index)
    model = fit_probe(feats_s, y_s, aux, protocol.probe, rng_aux)

    if protocol.vote.kind is VoteKind.NONE and protocol.vote.generator is None:
        preds = predict_task(model, embedder.embed_indices(dataset, ep.query_idx))
    else:
        size = embedder.input_size
        if protocol.vote.kind is VoteKind.LOC5:
            size = 2 * embedder.input_size
        try:
            images = dataset.views(ep.query_idx, size)
        except IncompatibleTasks as exc:
            raise IncompatibleScheme(str(exc)) from exc
        preds = predict_vote(model, embedder, images, protocol.vote)
    return float(np.mean(preds == ep.query_y))


def run_episodic_eval(embedder, protocol, dataset, split, workers=1):
    """Full protocol: trials x episodes, probe per episode, median-of-trials.

    Deterministic for a fixed (embedder, protocol.seed): every episode's
    sampling, support augmentation, and aux draw comes from a stream keyed by
    (seed, trial, episode_index).
    """
    aux = protocol.aux
    if aux.mode is not AuxMode.NONE and aux.pool is None:
        pool = AuxPool(
            features=embedder.embed_indices(dataset, split.inner_train),
            class_ids=dataset.labels[split.inner_train].copy(),
        )
        aux = replace(aux, pool=pool)

    # warm the per-index cache once so concurrent episodes only read it
    embedder.embed_indices(dataset, dataset.indices(protocol.partition))

    trial_accs = []
    for t in range(protocol.trials):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                accs = list(
                    ex.map(
                        lambda e: _episode_accuracy(embedder, protocol, dataset, split, aux, t, e),
                        range(protocol.episodes_per_trial),
                    )
                )
        else:
            accs = [
                _episode_accuracy(embedder, protocol, dataset, split, aux, t, e)
                for e in range(protocol.episodes_per_trial)
            ]
        trial_accs.append(accs)

    trial_means = [float(np.mean(a)) for a in trial_accs]
    reported = aggregate_trials(trial_means)
    ci = episodic_ci(trial_accs[median_trial_index(trial_means)])
    return EvalReport(
        trial_episode_acc=trial_accs,
        trial_means=trial_means,
        reported_acc=reported,
        ci_halfwidth=ci,
        metadata=dict(
            representation_id=embedder.rep_id,
            dataset=dataset.spec.name,
            n_way=protocol.n_way,
            k_shot=protocol.k_shot,
            aux_mode=aux.describe(),
            vote_kind=protocol.vote.kind.value,
            trials=protocol.trials,
            episodes=protocol.episodes_per_trial,
            seed=protocol.seed,
            interval="ci95",
        ),
    )


# --------------------------------------------------------------------------
# cross-task holdout evaluation
# --------------------------------------------------------------------------

def _task_rows(embedder, dataset, idxs, eval_task, cls_map):
    """Features and labels for one eval task over the given images."""
    from .pretext import transform_location, transform_rotation

    s = embedder.input_size
    if eval_task is TaskKind.CLS:
        feats = embedder.embed_indices(dataset, idxs)
        labels = np.array([cls_map[int(dataset.labels[i])] for i in idxs])
        return feats, labels
    if eval_task is TaskKind.ROT:
        views = dataset.views(idxs, s)
        rows = np.concatenate(
            [np.stack([transform_rotation(v, r) for v in views]) for r in range(4)]
        )
        labels = np.repeat(np.arange(4), len(views))
        return embedder.embed_views(rows), labels
    if eval_task is TaskKind.LOC4:
        views = dataset.views(idxs, 2 * s)
        rows = np.concatenate(
            [np.stack([transform_location(v, p) for v in views]) for p in range(4)]
        )
        labels = np.repeat(np.arange(4), len(views))
        return embedder.embed_views(rows), labels
    raise IncompatibleTasks(f"unsupported holdout eval task {eval_task}")


def cross_eval_holdout(embedder, eval_task, dataset, split, probe_cfg=None):
    """Accuracy of a fresh linear probe for eval_task on the 10% holdout.

    The probe trains on inner-train features (transform-labeled for ROT and
    LOC4) and is scored on the inner-holdout rows.
    """
    probe_cfg = probe_cfg or ProbeConfig()
    cls_map = {c: i for i, c in enumerate(sorted(dataset.spec.class_partitions["train"]))}
    X_tr, y_tr = _task_rows(embedder, dataset, split.inner_train, eval_task, cls_map)
    X_ho, y_ho = _task_rows(embedder, dataset, split.inner_holdout, eval_task, cls_map)
    model = fit_probe(X_tr, y_tr, AuxAugmentation(), probe_cfg, stream(0))
    preds = predict_task(model, X_ho)
    return float(np.mean(preds == y_ho))


@dataclass
class CrossEvalMatrix:
    sources: list   # representation ids, row order
    eval_tasks: list  # TaskKind, column order
    cells: dict     # (source, TaskKind) -> accuracy in [0, 1]

    def row(self, source):
        return [self.cells[(source, t)] for t in self.eval_tasks]

    def diagonal_is_row_max(self, source, own_task):
        own = self.cells[(source, own_task)]
        return all(own >= v for v in self.row(source))

    def to_csv_rows(self):
        rows = [("source_task", "eval_task", "accuracy_pct")]
        for s in self.sources:
            for t in self.eval_tasks:
                rows.append((s, t.value, f"{100 * self.cells[(s, t)]:.2f}"))
        return rows


def cross_eval_matrix(embedders, dataset, split, eval_tasks=(TaskKind.CLS, TaskKind.ROT, TaskKind.LOC4),
                      probe_cfg=None):
    """Holdout accuracies of several representations on several eval tasks.

    embedders: dict source_id -> Embedder.
    """
    cells = {}
    for src, emb in embedders.items():
        for t in eval_tasks:
            cells[(src, t)] = cross_eval_holdout(emb, t, dataset, split, probe_cfg)
    return CrossEvalMatrix(list(embedders), list(eval_tasks), cells)


# --------------------------------------------------------------------------
# report rendering
# --------------------------------------------------------------------------

REPORT_CSV_COLUMNS = (
    "representation_id", "dataset", "n_way", "k_shot", "aux_mode", "vote_kind",
    "acc_pct", "ci95_pct", "trials", "episodes", "seed",
)


def format_cell(acc, ci):
    """Accuracy/interval pair as a percentage cell, e.g. 61.75(0.79)."""
    return f"{100 * acc:.2f}({100 * ci:.2f})"


def report_csv_row(report):
    m = report.metadata
    return (
        m["representation_id"], m["dataset"], m["n_way"], m["k_shot"],
        m["aux_mode"], m["vote_kind"],
        f"{100 * report.reported_acc:.2f}", f"{100 * report.ci_halfwidth:.2f}",
        m["trials"], m["episodes"], m["seed"],
    )


def report_table(reports):
    """Aligned text table, one row per representation, one column per task.

    Returns (text, csv_rows); csv_rows carry one line per report with the
    standard column set.
    """
    col_keys = []
    rows = {}
    for rep in reports:
        m = rep.metadata
        ck = (m["n_way"], m["k_shot"], m["aux_mode"], m["vote_kind"])
        if ck not in col_keys:
            col_keys.append(ck)
        rows.setdefault(m["representation_id"], {})[ck] = format_cell(
            rep.reported_acc, rep.ci_halfwidth
        )
    col_keys.sort(key=lambda c: (c[0], c[1], str(c[2]), str(c[3])))

    def col_name(ck):
        name = f"{ck[0]}w{ck[1]}s"
        if ck[2] != "none":
            name += f"+aux[{ck[2]}]"
        if ck[3] != "none":
            name += f"+vote[{ck[3]}]"
        return name

    headers = ["representation"] + [col_name(c) for c in col_keys]
    table = [headers]
    for rid, cells in rows.items():
        table.append([rid] + [cells.get(c, "-") for c in col_keys])
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = [
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in table
    ]
    csv_rows = [REPORT_CSV_COLUMNS] + [report_csv_row(r) for r in reports]
    return "\n".join(lines), csv_rows
