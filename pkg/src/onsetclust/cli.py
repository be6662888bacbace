"""Command-line entry point.

Each stage reads and writes plain files (matrix .bin + .json sidecars, CSV,
JSON) so stages can be run one at a time or chained by ``pipeline``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import classifier, core, evalkit, segmenter, spectral, ticc
from .core import InputError, InvariantError, NumericalError

log = logging.getLogger("onsetclust")

# key -> (type, default). Config-file keys and long flags share these names.
SETTINGS = {
    "epoch_len_s": (float, 2.0),
    "stride_s": (float, 2.0),
    "sample_rate_hz": (float, None),
    "top_k": (int, spectral.DEFAULT_TOP_K),
    "K_diff": (int, 2),
    "S": (int, 8),
    "H": (int, 16),
    "lr": (float, 0.05),
    "batch_size": (int, 32),
    "max_epochs": (int, 200),
    "patience": (int, 10),
    "seed": (int, 0),
    "omega": (int, 1),
    "beta": (float, segmenter.DEFAULT_BETA),
    "lambda": (float, 0.05),
    "K": (int, 2),
    "max_em_iter": (int, 100),
    "semantics": (str, None),
}

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


# ------------------------------------------------------------------- config

def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment. Unknown keys are errors."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SETTINGS:
            raise InputError(f"{path}:{lineno}: unknown key {key!r}")
        typ = SETTINGS[key][0]
        try:
            out[key] = typ(value)
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def resolve_settings(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {k: d for k, (_, d) in SETTINGS.items()}
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for key in SETTINGS:
        v = getattr(args, _dest(key), None)
        if v is not None:
            cfg[key] = v
    _validate(cfg)
    return cfg


def _validate(cfg):
    positive = ("epoch_len_s", "stride_s", "lr", "K_diff", "S", "H", "batch_size", "omega", "K",
                "top_k", "patience", "max_em_iter")
    for key in positive:
        if not cfg[key] > 0:
            raise InputError(f"{key} must be positive, got {cfg[key]}")
    for key in ("beta", "lambda", "max_epochs"):
        if cfg[key] < 0:
            raise InputError(f"{key} must be non-negative, got {cfg[key]}")
    if cfg["sample_rate_hz"] is not None and not cfg["sample_rate_hz"] > 0:
        raise InputError("sample_rate_hz must be positive")
    if cfg["semantics"]:
        parse_semantics(cfg["semantics"])


def parse_semantics(text: Optional[str]) -> Optional[dict]:
    """``"0:normal,1:seizure"`` -> ``{0: "normal", 1: "seizure"}``."""
    if not text:
        return None
    out = {}
    for item in text.split(","):
        try:
            k, name = item.split(":")
            out[int(k)] = name.strip()
        except ValueError:
            raise InputError(f"bad semantics entry {item!r}; expected id:name") from None
        if out[int(k)] not in (segmenter.NORMAL, segmenter.SEIZURE, segmenter.PREICTAL, "other"):
            raise InputError(f"unknown state name {name!r}")
    return out


def _dest(key: str) -> str:
    return "lam" if key == "lambda" else key


# ----------------------------------------------------------------- helpers

def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _epoch_meta(epochs_path: Path) -> dict:
    return _read_json(epochs_path.with_suffix(".json"))


# ------------------------------------------------------------------- stages

def stage_segment(recording_path, out_dir: Path, cfg: dict, labels_path=None) -> Path:
    rec = core.read_recording(recording_path, cfg["sample_rate_hz"])
    epochs = core.segment_recording(rec, cfg["epoch_len_s"], cfg["stride_s"])
    if labels_path is not None:
        labels = core.read_labels_csv(labels_path)
        if labels.size != len(epochs):
            raise InputError(f"{labels_path}: {labels.size} labels for {len(epochs)} epochs")
        core.LabelSequence(labels, 3)
        core.write_labels_csv(out_dir / "epoch_labels.csv", labels)
    tensor = np.stack([e.window for e in epochs])
    path = core.write_matrix(out_dir / "epochs.bin", tensor, "epochs",
                             sample_rate_hz=rec.sample_rate_hz, epoch_len_s=cfg["epoch_len_s"],
                             stride_s=cfg["stride_s"], channels=list(rec.channel_names))
    log.info("segment: %d epochs of %d samples", tensor.shape[0], tensor.shape[2])
    return path


def stage_features(epochs_path, out_dir: Path, cfg: dict) -> Path:
    epochs_path = Path(epochs_path)
    tensor = core.read_matrix(epochs_path)
    if tensor.ndim != 3:
        raise InputError(f"{epochs_path}: expected a P x C x L tensor")
    meta = _epoch_meta(epochs_path)
    stride = float(meta.get("stride_s", cfg["stride_s"]))
    epochs = [core.Epoch(w, i, i * stride) for i, w in enumerate(tensor)]
    graphs = spectral.epoch_graphs(epochs, cfg["top_k"])
    feats, adj = spectral.stack_graphs(graphs)
    extra = {"top_k": cfg["top_k"], "stride_s": stride, "channels": meta.get("channels")}
    core.write_matrix(out_dir / "adjacency.bin", adj, "graph.adjacency", **extra)
    return core.write_matrix(out_dir / "features.bin", feats, "graph.features", **extra)


def _load_graphs(features_path):
    features_path = Path(features_path)
    feats = core.read_matrix(features_path)
    adj = core.read_matrix(features_path.with_name("adjacency.bin"))
    meta = _read_json(features_path.with_suffix(".json"))
    if feats.ndim != 3 or adj.shape != feats.shape[:2] + (feats.shape[1],):
        raise InputError(f"{features_path}: features/adjacency shapes disagree")
    return spectral.unstack_graphs(feats, adj, int(meta.get("top_k", 0))), meta


def stage_train(features_path, labels_path, out_dir: Path, cfg: dict) -> Path:
    graphs, _ = _load_graphs(features_path)
    labels = core.read_labels_csv(labels_path)
    if labels.size != len(graphs):
        raise InputError(f"{labels_path}: {labels.size} labels for {len(graphs)} epochs")
    # the classifier is binary: preictal epochs count as non-seizure
    y = (labels == 1).astype(np.int64)
    res = classifier.train(graphs, y, lr=cfg["lr"], batch_size=cfg["batch_size"],
                           max_epochs=cfg["max_epochs"], seed=cfg["seed"], S=cfg["S"], H=cfg["H"],
                           K_diff=cfg["K_diff"], patience=cfg["patience"])
    if not res.params.is_finite():
        raise NumericalError("classifier weights became non-finite")
    acc = float(np.mean(classifier.predict(graphs, res.params) == y))
    log.info("train: %d epochs, final loss %.4f, train accuracy %.3f", res.n_epochs, res.loss_history[-1], acc)
    model_dir = out_dir / "classifier"
    model_dir.mkdir(parents=True, exist_ok=True)
    _write_json(model_dir / "training.json", {"loss_history": res.loss_history, "n_epochs": res.n_epochs,
                                              "train_accuracy": acc})
    return classifier.save_params(res.params, model_dir)


def stage_logits(features_path, model_dir, out_dir: Path, cfg: dict) -> Path:
    graphs, meta = _load_graphs(features_path)
    params = classifier.load_params(model_dir)
    if params.F != graphs[0].nodes.features.shape[1]:
        raise InputError(f"classifier expects {params.F} frequency bins, features have "
                         f"{graphs[0].nodes.features.shape[1]}")
    series = classifier.emit_logits(params, graphs)
    return core.write_matrix(out_dir / "logits.bin", series.probs, "logits",
                             stride_s=meta.get("stride_s", cfg["stride_s"]),
                             channels=meta.get("channels"))


def _check_models(models, strict: bool, converged: bool):
    for k, m in enumerate(models):
        if not ticc.is_block_toeplitz(m.theta, m.omega, m.C):
            raise InvariantError(f"cluster {k} precision is not block-Toeplitz")
        try:
            np.linalg.cholesky(m.theta)
        except np.linalg.LinAlgError:
            raise InvariantError(f"cluster {k} precision is not positive definite") from None
        if strict and not m.converged:
            raise NumericalError(f"cluster {k} graphical lasso did not converge")
    if strict and not converged:
        raise NumericalError("EM reached max_em_iter without a fixed assignment")


def stage_cluster(logits_path, out_dir: Path, cfg: dict, strict: bool = False,
                  bic_candidates: Optional[list] = None) -> Path:
    logits_path = Path(logits_path)
    Z = core.read_matrix(logits_path)
    if Z.ndim != 2:
        raise InputError(f"{logits_path}: expected a P x C matrix")
    meta = _read_json(logits_path.with_suffix(".json"))
    stride = float(meta.get("stride_s", cfg["stride_s"]))
    channels = meta.get("channels")
    omega, C = cfg["omega"], Z.shape[1]
    W = ticc.stack_windows(Z, omega)
    gcfg = ticc.GlassoConfig(lam=cfg["lambda"])
    K = cfg["K"]
    if bic_candidates:
        best, table, failures = segmenter.bic_select(W, bic_candidates, cfg["beta"], gcfg, omega,
                                                     cfg["seed"], cfg["max_em_iter"])
        _write_json(out_dir / "bic.json", {"best_K": best, "table": table, "failures": failures})
        if best is None:
            raise NumericalError("every BIC candidate failed")
        K = best
    try:
        seg = segmenter.em_fit(W, K, cfg["beta"], gcfg, omega=omega, C=C, max_em_iter=cfg["max_em_iter"],
                               seed=cfg["seed"], stride_s=stride, semantics=parse_semantics(cfg["semantics"]))
    except ticc.EmptyCluster as exc:
        raise NumericalError(f"clustering failed: {exc}") from exc
    _check_models(seg.models, strict, seg.converged)
    log.info("cluster: K=%d, %d EM iterations, converged=%s", len(seg.models), seg.n_iterations, seg.converged)
    return segmenter.save_segmentation(seg, out_dir, cfg["lambda"], channels)


def _timeline_rows(labels, sem: dict, truth, stride: float):
    for p, k in enumerate(labels):
        yield [p, repr(p * stride), "" if truth is None else int(truth[p]), k, sem.get(k, "other")]


def stage_detect(segmentation_path, out_dir: Path, cfg: dict, labels_path=None) -> Path:
    """Re-derive onsets (optionally under overridden semantics) and write the timeline CSV."""
    seg_json = _read_json(segmentation_path)
    try:
        labels = np.asarray(seg_json["epoch_labels"], dtype=np.int64)
        clusters = seg_json["clusters"]
        stride = float(seg_json.get("stride_s", cfg["stride_s"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{segmentation_path}: malformed segmentation ({exc})") from exc
    sem = parse_semantics(cfg["semantics"]) or {int(c["id"]): c["semantics"] for c in clusters}
    _, events = segmenter.extract_onsets(labels, 1, stride, sem, windows=False)
    truth = None
    if labels_path is not None:
        truth = core.read_labels_csv(labels_path)
        if truth.size != labels.size:
            raise InputError(f"{labels_path}: {truth.size} labels for {labels.size} epochs")
    onsets = [{k: e[k] for k in ("type", "from", "to", "epoch", "time_s")} for e in events]
    _write_json(out_dir / "onsets.json", {"onsets": onsets,
                                          "seizure_onsets": [e for e in onsets if e["type"] == "SO"]})
    path = out_dir / "timeline.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "time_s", "true_label", "pred_cluster", "semantics"])
        w.writerows(_timeline_rows(labels.tolist(), sem, truth, stride))
    return path


def stage_eval(segmentation_path, labels_path, out_dir: Path) -> Path:
    seg_json = _read_json(segmentation_path)
    try:
        pred = np.asarray(seg_json["epoch_labels"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{segmentation_path}: no epoch_labels ({exc})") from exc
    truth = core.read_labels_csv(labels_path)
    report = evalkit.evaluate(truth, pred)
    return _write_json(out_dir / "metrics.json", report.to_json())


def stage_synth(kind: str, out_dir: Path, cfg: dict) -> Path:
    seed = cfg["seed"]
    if kind == "recording":
        rec, labels = evalkit.synthetic_recording(seed, epoch_len_s=cfg["epoch_len_s"])
        core.write_labels_csv(out_dir / "labels.csv", labels)
        return core.write_recording_bin(out_dir / "recording.bin", rec)
    spec = evalkit.make_scenario_a(seed) if kind == "scenario-a" else evalkit.make_single_state(seed)
    series, labels, cps = evalkit.generate_synthetic(spec)
    core.write_labels_csv(out_dir / "labels.csv", labels)
    _write_json(out_dir / "change_points.json", {"change_points": cps})
    return core.write_matrix(out_dir / "series.bin", series, f"synthetic.{kind}", stride_s=cfg["stride_s"])


def stage_pipeline(args, cfg: dict, out_dir: Path) -> Path:
    if args.skip_classifier:
        if not args.logits:
            raise StageError("pipeline", InputError("--skip-classifier needs --logits"))
        logits_path = Path(args.logits)
    else:
        if not args.recording:
            raise StageError("pipeline", InputError("a recording is required unless --skip-classifier"))
        epochs_path = _run("segment", stage_segment, args.recording, out_dir, cfg, args.labels)
        feats_path = _run("features", stage_features, epochs_path, out_dir, cfg)
        model_manifest = _run("train-classifier", stage_train, feats_path, args.labels, out_dir, cfg)
        logits_path = _run("logits", stage_logits, feats_path, model_manifest.parent, out_dir, cfg)
    seg_path = _run("cluster", stage_cluster, logits_path, out_dir, cfg, args.strict)
    _run("detect", stage_detect, seg_path, out_dir, cfg, args.labels)
    return _run("eval", stage_eval, seg_path, args.labels, out_dir)


def _run(stage, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except (InputError, NumericalError, InvariantError, np.linalg.LinAlgError) as exc:
        raise StageError(stage, exc) from exc


# ---------------------------------------------------------------------- CLI

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file; flags win")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=".", help="output directory (default: current)")
    common.add_argument("--verbose", "-v", action="store_true")
    for key, (typ, default) in SETTINGS.items():
        if key == "seed":
            continue
        common.add_argument(f"--{key.replace('_', '-')}", dest=_dest(key), type=typ, default=None,
                            help=f"default {default}")

    p = argparse.ArgumentParser(prog="onsetclust", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("segment", parents=[common], help="cut a recording into epochs")
    s.add_argument("recording")
    s.add_argument("--labels", help="per-epoch labels CSV to validate and copy")

    s = sub.add_parser("features", parents=[common], help="spectral node features and graphs")
    s.add_argument("epochs", help="epochs.bin from the segment command")

    s = sub.add_parser("train-classifier", parents=[common], help="fit the channel-logit classifier")
    s.add_argument("features", help="features.bin (adjacency.bin must sit next to it)")
    s.add_argument("--labels", required=True)

    s = sub.add_parser("logits", parents=[common], help="emit per-channel seizure probabilities")
    s.add_argument("features")
    s.add_argument("--model", required=True, help="directory holding classifier_manifest.json")

    s = sub.add_parser("cluster", parents=[common], help="segment a logit series into clusters")
    s.add_argument("logits", help="P x C matrix file")
    s.add_argument("--strict", action="store_true", help="treat non-convergence as an error (exit 3)")
    s.add_argument("--bic", help="comma-separated K candidates; the BIC winner replaces --K")

    s = sub.add_parser("detect", parents=[common], help="onset records and the timeline CSV")
    s.add_argument("segmentation")
    s.add_argument("--labels", help="truth labels for the timeline")

    s = sub.add_parser("eval", parents=[common], help="NMI/ARI/ACC against truth labels")
    s.add_argument("segmentation")
    s.add_argument("labels")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("kind", choices=["scenario-a", "single-state", "recording"])

    s = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    s.add_argument("recording", nargs="?")
    s.add_argument("--labels", required=True, help="per-epoch truth labels CSV")
    s.add_argument("--skip-classifier", action="store_true")
    s.add_argument("--logits", help="logit matrix to cluster when skipping the classifier")
    s.add_argument("--strict", action="store_true")
    return p


def dispatch(args, cfg) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "segment":
        return _run(cmd, stage_segment, args.recording, out, cfg, args.labels)
    if cmd == "features":
        return _run(cmd, stage_features, args.epochs, out, cfg)
    if cmd == "train-classifier":
        return _run(cmd, stage_train, args.features, args.labels, out, cfg)
    if cmd == "logits":
        return _run(cmd, stage_logits, args.features, args.model, out, cfg)
    if cmd == "cluster":
        cands = None
        if args.bic:
            try:
                cands = [int(v) for v in args.bic.split(",")]
            except ValueError:
                raise StageError(cmd, InputError(f"bad --bic list {args.bic!r}")) from None
        return _run(cmd, stage_cluster, args.logits, out, cfg, args.strict, cands)
    if cmd == "detect":
        return _run(cmd, stage_detect, args.segmentation, out, cfg, args.labels)
    if cmd == "eval":
        return _run(cmd, stage_eval, args.segmentation, args.labels, out)
    if cmd == "synth":
        return _run(cmd, stage_synth, args.kind, out, cfg)
    return stage_pipeline(args, cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_settings(args)
        path = dispatch(args, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, InputError):
            return EXIT_INPUT
        if isinstance(cause, InvariantError):
            return EXIT_INVARIANT
        return EXIT_NUMERIC
    except InputError as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
