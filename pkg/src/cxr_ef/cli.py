"""Command line entry point: ``cxr-ef <command>``.

Each stage reads and writes under ``<output_root>/<run_id>/``::

    manifest.csv  split.csv  history.csv  best.ckpt  last.ckpt
    predictions.csv  metrics.json  figures/  maps/  config.yaml  run_manifest.json

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .config import ConfigError, OUTPUT_ROOT_ENV, RunConfig

logger = logging.getLogger("cxr_ef")


class UsageError(Exception):
    """Bad input detected by a command; exit code 2."""


class StageFailure(Exception):
    """Runtime failure of a stage; exit code 1."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- run directory ---------------------------------------------------------------------

class RunDir:
    def __init__(self, config: RunConfig):
        self.config = config
        self.path = config.output_dir()

    def __truediv__(self, name) -> Path:
        return self.path / name

    @contextmanager
    def stage(self, name: str, inputs=()):
        """Lock the run directory and record the stage in run_manifest.json before it writes anything."""
        from filelock import FileLock, Timeout

        self.path.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(self.path / ".lock"), timeout=0)
        try:
            lock.acquire()
        except Timeout:
            raise StageFailure(f"run directory {self.path} is in use by another command") from None
        try:
            (self.path / "config.yaml").write_text(self.config.dumps(), encoding="utf-8")
            manifest = self._read_manifest()
            entry = {
                "started_at": _now(),
                "status": "running",
                "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
            }
            manifest["stages"][name] = entry
            self._write_manifest(manifest)
            try:
                yield
            except BaseException as exc:
                entry.update(status="failed", error=f"{type(exc).__name__}: {exc}", finished_at=_now())
                self._write_manifest(manifest)
                raise
            entry.update(status="ok", finished_at=_now())
            self._write_manifest(manifest)
        finally:
            lock.release()

    def _read_manifest(self) -> dict:
        from .training import derive_seeds

        path = self.path / "run_manifest.json"
        doc = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {"stages": {}}
        cfg = self.config
        init_seed, order_seed, aug_seed = derive_seeds(cfg.train.seed)
        doc.update({
            "tool": "cxr-ef",
            "tool_version": __version__,
            "run_id": cfg.run_id,
            "config": cfg.to_dict(),
            "seeds": {"synthetic": cfg.cohort.synthetic.seed, "split": cfg.split.seed, "train": cfg.train.seed,
                      "init": init_seed, "data_order": order_seed, "augmentation": aug_seed},
        })
        doc.setdefault("created_at", _now())
        return doc

    def _write_manifest(self, doc: dict) -> None:
        (self.path / "run_manifest.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    def require(self, name: str, what: str) -> Path:
        p = self.path / name
        if not p.exists():
            raise UsageError(f"{what} not found: {p}")
        return p

    def image_root(self) -> Path:
        c = self.config.cohort
        if c.source == "synthetic":
            return self.path
        return Path(c.image_root) if c.image_root else self.path


# -- commands ----------------------------------------------------------------------------

def cmd_cohort_build(cfg: RunConfig) -> int:
    from .cohort import (IcdLabelMap, build_cohort, generate_synthetic_cohort, read_metadata_csv,
                         write_manifest)

    run = RunDir(cfg)
    c = cfg.cohort
    if c.source == "synthetic":
        with run.stage("cohort-build"):
            s = c.synthetic
            result = generate_synthetic_cohort(s.n, s.class_signal, s.seed, run.path, image_size=s.image_size)
            manifest, build_info = result.manifest, {"source": "synthetic", "conflicts": 0, "unmatched": 0}
            _write_demographics(run, manifest, build_info)
    else:
        if not c.metadata_path:
            raise UsageError("cohort.metadata_path is required for a metadata cohort")
        if not c.icd_map_path:
            raise UsageError("cohort.icd_map_path is required for a metadata cohort")
        for p, what in ((c.metadata_path, "metadata file"), (c.icd_map_path, "ICD map file")):
            if not Path(p).exists():
                raise UsageError(f"{what} not found: {p}")
        with run.stage("cohort-build", inputs=[c.metadata_path, c.icd_map_path]):
            icd_map = IcdLabelMap.read_csv(c.icd_map_path)
            result = build_cohort(read_metadata_csv(c.metadata_path), icd_map, provenance=str(c.metadata_path))
            manifest = result.manifest
            write_manifest(manifest, run / "manifest.csv")
            build_info = {"source": "metadata", "conflicts": result.conflicts, "unmatched": result.unmatched,
                          "conflict_study_ids": result.conflict_study_ids}
            _write_demographics(run, manifest, build_info)
    counts = manifest.label_counts()
    print(f"manifest: {len(manifest)} studies ({', '.join(f'{k.value}={v}' for k, v in counts.items())}), "
          f"conflicts excluded: {build_info['conflicts']} -> {run / 'manifest.csv'}")
    return 0


def _write_demographics(run: RunDir, manifest, build_info: dict) -> None:
    from .cohort import summarize_demographics

    summary = summarize_demographics(manifest)
    doc = {**summary.to_dict(), "build": build_info}
    (run / "demographics.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    (run / "demographics.txt").write_text(summary.render(), encoding="utf-8")


def _load_manifest(run: RunDir):
    from .cohort import read_manifest

    return read_manifest(run.require("manifest.csv", "manifest"))


def cmd_split(cfg: RunConfig) -> int:
    from .cohort import check_leakage, split_cohort

    run = RunDir(cfg)
    manifest_path = run.require("manifest.csv", "manifest")
    with run.stage("split", inputs=[manifest_path]):
        manifest = _load_manifest(run)
        assignment = split_cohort(manifest, cfg.split.fractions, cfg.split.seed)
        report = check_leakage(assignment, manifest)
        assignment.write(run / "split.csv")
        doc = {**report.to_dict(), "requested": list(assignment.fractions),
               "realized": list(assignment.realized_fractions()),
               "counts": {k.value: v for k, v in assignment.counts().items()}}
        (run / "leakage.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        if not report.clean:
            raise StageFailure(f"leakage detected: {len(report.patients_crossing)} patients, "
                               f"{len(report.duplicate_refs_crossing)} image refs cross splits")
    counts = assignment.counts()
    print("split: " + ", ".join(f"{k.value}={v}" for k, v in counts.items()) + " (leakage check clean)")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    from .cohort import SplitAssignment
    from .models import build_model, parameter_report
    from .training import TrainingDivergedError, derive_seeds, train

    run = RunDir(cfg)
    manifest_path = run.require("manifest.csv", "manifest")
    split_path = run.require("split.csv", "split file")
    marker = run / "TRAINING_INCOMPLETE"
    with run.stage("train", inputs=[manifest_path, split_path]):
        manifest = _load_manifest(run)
        split = SplitAssignment.read(split_path, cfg.split.fractions, cfg.split.seed)
        tcfg = cfg.train_config()
        model = build_model(cfg.model_config(), seed=derive_seeds(tcfg.seed)[0])
        params = parameter_report(model)
        (run / "params.json").write_text(json.dumps({
            "backbone": params.backbone.value, "count": params.count, "reported": params.reported_count,
            "discrepancy": params.discrepancy}, indent=2) + "\n", encoding="utf-8")
        print(params.describe())
        marker.write_text("training started; checkpoints in this directory are partial\n", encoding="utf-8")
        try:
            result = train(model, manifest, split, tcfg, image_root=run.image_root(), out_dir=run.path)
        except TrainingDivergedError as exc:
            marker.write_text(f"training aborted: {exc}\n", encoding="utf-8")
            raise StageFailure(str(exc)) from exc
        result.history.write(run / "history.csv")
        marker.unlink()
    h = result.history.epochs
    if h:
        print(f"trained {len(h)} epochs; final val_loss={h[-1].val_loss:.4f} val_acc={h[-1].val_acc:.4f}; "
              f"best epoch {result.best_epoch}")
    else:
        print("max_epochs=0: no training performed")
    return 0


def cmd_evaluate(cfg: RunConfig, checkpoint: str | None = None) -> int:
    from .cohort import Split, SplitAssignment
    from .evaluation import (classification_report, confidence_buckets, dumps_metrics, metrics_json,
                             render_overall, render_table, subgroup_report, write_predictions)
    from .models import load_checkpoint
    from .training import ImageSource, evaluate_epoch

    run = RunDir(cfg)
    manifest_path = run.require("manifest.csv", "manifest")
    split_path = run.require("split.csv", "split file")
    ckpt = Path(checkpoint) if checkpoint else run / "best.ckpt"
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    manifest = _load_manifest(run)
    split = SplitAssignment.read(split_path)
    which = Split(cfg.evaluation.split)
    records = manifest.subset(split.studies(which))
    if not records:
        raise UsageError(f"{which.value} split is empty; nothing to evaluate")
    e = cfg.evaluation
    with run.stage("evaluate", inputs=[manifest_path, split_path, ckpt]):
        model, _ = load_checkpoint(ckpt)
        source = ImageSource.for_model(model, run.image_root())
        _, _, preds = evaluate_epoch(model, records, cfg.train.batch_size, source)
        write_predictions(preds, run / "predictions.csv")
        report = classification_report(preds)
        buckets = confidence_buckets(preds, e.hi_threshold, e.lo_threshold)
        subgroups = [subgroup_report(preds, manifest, facet, e.min_support) for facet in e.subgroups]
        (run / "metrics.json").write_text(dumps_metrics(metrics_json(report, buckets, subgroups)), encoding="utf-8")
        arch = model.config.backbone.value
        text = render_table([(arch, report)], title=f"{which.value} split, {arch}")
        text += "\n" + render_overall(report, buckets)
        for sg in subgroups:
            rows = [(name + (" (low support)" if entry.low_support else ""), entry.report)
                    for name, entry in sg.groups.items()]
            text += "\n" + render_table(rows, title=f"by {sg.facet}")
        (run / "metrics.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_explain(cfg: RunConfig, checkpoint: str | None = None, predictions: str | None = None) -> int:
    from .cohort import Label
    from .evaluation import read_predictions
    from .explain import ATTRIBUTION_METHODS, Method, overlay, select_error_cases, write_composite_png, write_map_png
    from .models import load_checkpoint
    from .training import ImageSource

    run = RunDir(cfg)
    manifest_path = run.require("manifest.csv", "manifest")
    ckpt = Path(checkpoint) if checkpoint else run / "best.ckpt"
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    pred_path = Path(predictions) if predictions else run / "predictions.csv"
    if not pred_path.exists():
        raise UsageError(f"predictions file not found: {pred_path}")
    x = cfg.explain
    methods = [Method(m) for m in x.methods]
    with run.stage("explain", inputs=[manifest_path, ckpt, pred_path]):
        for stale in ("figures", "maps"):
            shutil.rmtree(run / stale, ignore_errors=True)
        manifest = _load_manifest(run)
        studies = manifest.by_study()
        preds = {p.study_id: p for p in read_predictions(pred_path)}
        selection = select_error_cases(preds.values(), x.k)
        (run / "selection.json").write_text(json.dumps(selection.to_dict(), indent=2) + "\n", encoding="utf-8")
        model, _ = load_checkpoint(ckpt)
        source = ImageSource.for_model(model, run.image_root())
        n_fig = degenerate = 0
        for group, ids in selection.groups().items():
            for sid in ids:
                if sid not in studies:
                    raise UsageError(f"study {sid!r} from {pred_path} is not in the manifest")
                image = source.get(studies[sid])
                target = preds[sid].predicted if x.target == "predicted" else Label(x.target)
                for method in methods:
                    amap = ATTRIBUTION_METHODS[method](model, image, target)
                    if amap.degenerate:
                        degenerate += 1
                        logger.warning("degenerate %s map for %s", method.value, sid)
                    write_map_png(amap, run / "maps" / group / f"{sid}_{method.value}.png", study_id=sid)
                    panels = overlay(image, amap, x.alpha, x.colormap)
                    write_composite_png(panels, run / "figures" / group / f"{sid}_{method.value}.png")
                    n_fig += 1
    print(f"wrote {n_fig} composites ({degenerate} degenerate maps) under {run / 'figures'}")
    return 0


def cmd_run(cfg: RunConfig) -> int:
    for step in (cmd_cohort_build, cmd_split, cmd_train, cmd_evaluate, cmd_explain):
        step(cfg)
    return 0


# -- argument handling ---------------------------------------------------------------------

def _kv_pairs(tokens) -> dict:
    out = {}
    for tok in tokens:
        for part in tok.split(","):
            if not part:
                continue
            if "=" not in part:
                raise UsageError(f"expected key=value, got {part!r}")
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _resolve_config(args) -> RunConfig:
    """Config file (explicit, else the run dir's snapshot, else defaults) plus command-line overrides."""
    if args.config:
        data = RunConfig.load(args.config).to_dict()
    else:
        data = RunConfig().to_dict()
        probe = RunConfig.from_dict({**data, **({"run_id": args.run_id} if args.run_id else {}),
                                     **({"output_root": args.output_root} if args.output_root else {})})
        snapshot = probe.output_dir() / "config.yaml"
        if snapshot.exists():
            data = RunConfig.load(snapshot).to_dict()
    if args.run_id:
        data["run_id"] = args.run_id
    if args.output_root:
        data["output_root"] = args.output_root

    cmd = args.command
    if cmd == "cohort-build":
        if args.synthetic is not None:
            kv = _kv_pairs(args.synthetic)
            syn = data["cohort"]["synthetic"]
            types = {"n": int, "seed": int, "class_signal": float, "image_size": int}
            for k, v in kv.items():
                if k not in types:
                    raise UsageError(f"unknown synthetic parameter {k!r} (expected {', '.join(types)})")
                try:
                    syn[k] = types[k](v)
                except ValueError:
                    raise UsageError(f"synthetic parameter {k}={v!r} is not a valid {types[k].__name__}") from None
            data["cohort"]["source"] = "synthetic"
        if args.metadata:
            data["cohort"]["source"] = "metadata"
            data["cohort"]["metadata_path"] = args.metadata
        if args.icd_map:
            data["cohort"]["icd_map_path"] = args.icd_map
        if args.image_root:
            data["cohort"]["image_root"] = args.image_root
    if cmd in ("split", "run") and args.fractions:
        try:
            data["split"]["fractions"] = [float(v) for v in _csv_list(args.fractions)]
        except ValueError:
            raise UsageError(f"--fractions must be numbers, got {args.fractions!r}") from None
    if cmd in ("split", "run") and args.split_seed is not None:
        data["split"]["seed"] = args.split_seed
    if cmd in ("train", "run"):
        if args.arch:
            data["model"]["backbone"] = args.arch
            if args.arch != "tinyconv" and data["model"]["input_size"] == [64, 64]:
                data["model"]["input_size"] = [224, 224]
        if args.pretrained:
            data["model"]["pretrained"] = args.pretrained
        if args.augment:
            on = args.augment == "on"
            data["train"]["augmentation"]["rotation_enabled"] = on
            data["train"]["augmentation"]["crop_enabled"] = on
        for flag, key in (("epochs", "max_epochs"), ("batch_size", "batch_size"), ("lr", "initial_lr"),
                          ("train_seed", "seed")):
            if getattr(args, flag) is not None:
                data["train"][key] = getattr(args, flag)
    if cmd in ("evaluate", "run") and args.subgroups is not None:
        data["evaluation"]["subgroups"] = _csv_list(args.subgroups)
    if cmd in ("explain", "run"):
        if args.k is not None:
            data["explain"]["k"] = args.k
        if args.methods:
            data["explain"]["methods"] = _csv_list(args.methods)
        if args.alpha is not None:
            data["explain"]["alpha"] = args.alpha
    return RunConfig.from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxr-ef", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--run-id", help="run directory name (overrides config)")
        p.add_argument("--output-root", help=f"output root (default: config, ${OUTPUT_ROOT_ENV}, or ./out)")
        return p

    p = common(sub.add_parser("cohort-build", help="build the labelled cohort manifest and demographics"))
    p.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE",
                   help="generate a synthetic cohort, e.g. --synthetic n=200 seed=7")
    p.add_argument("--metadata", help="metadata CSV (study_id,patient_id,image_ref,icd_codes,age,sex,race_ethnicity)")
    p.add_argument("--icd-map", help="ICD map CSV (code,label)")
    p.add_argument("--image-root", help="directory image_ref paths are relative to")

    def split_opts(p):
        p.add_argument("--fractions", help="train,val,test fractions, e.g. 0.65,0.10,0.25")
        p.add_argument("--split-seed", type=int)

    def train_opts(p):
        p.add_argument("--arch", choices=["tinyconv", "resnet50", "efficientnet_b0", "densenet121"])
        p.add_argument("--pretrained", choices=["imagenet", "none"])
        p.add_argument("--augment", choices=["on", "off"], help="rotation + random resized crop during training")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--train-seed", type=int)

    def eval_opts(p):
        p.add_argument("--subgroups", help="comma-separated facets: race,sex")

    def explain_opts(p):
        p.add_argument("--k", type=int, help="cases per group (correct / false positive / false negative)")
        p.add_argument("--methods", help="comma-separated: saliency,gradcam")
        p.add_argument("--alpha", type=float, help="overlay blend weight")

    split_opts(common(sub.add_parser("split", help="patient-grouped train/val/test split + leakage check")))
    train_opts(common(sub.add_parser("train", help="train a model, writing checkpoints and history")))
    p = common(sub.add_parser("evaluate", help="predict on a split and write metric reports"))
    p.add_argument("--checkpoint")
    eval_opts(p)
    p = common(sub.add_parser("explain", help="saliency / Grad-CAM figures for selected cases"))
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    explain_opts(p)
    p = common(sub.add_parser("run", help="all stages in order"))
    split_opts(p)
    train_opts(p)
    eval_opts(p)
    explain_opts(p)
    p = sub.add_parser("show-config", help="print a configuration (default or --config) as YAML")
    p.add_argument("--config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "show-config":
            cfg = RunConfig.load(args.config) if args.config else RunConfig()
            print(cfg.dumps(), end="")
            return 0
        cfg = _resolve_config(args)
        if args.command == "cohort-build":
            return cmd_cohort_build(cfg)
        if args.command == "split":
            return cmd_split(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        if args.command == "explain":
            return cmd_explain(cfg, args.checkpoint, args.predictions)
        return cmd_run(cfg)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"cxr-ef: error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"cxr-ef: failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # schema / validation errors raised by the modules
        print(f"cxr-ef: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit 1
        logger.debug("unhandled", exc_info=True)
        print(f"cxr-ef: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
