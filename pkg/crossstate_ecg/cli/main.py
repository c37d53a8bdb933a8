"""
Command-line interface for the CrossStateECG pipeline
synth, preprocess, train, eval, ablation, enroll, verify, identify
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from crossstate_ecg import __version__
from crossstate_ecg.core import data_io
from crossstate_ecg.core.adaptive_auth import gallery_templates, identify, load_gallery, save_gallery, verify_user
from crossstate_ecg.core.errors import ConfigError, CrossStateError, InsufficientData, MissingFile
from crossstate_ecg.core.evaluate import run_ablation, run_scenario
from crossstate_ecg.core.network import CrossStateNet
from crossstate_ecg.core.pipeline import CrossStatePipeline, probe_embedding
from crossstate_ecg.core.preprocess import Preprocessor
from crossstate_ecg.models.schemas import ABLATIONS, Decision, RunConfig, SplitMode
from crossstate_ecg.utils.config import RUN_CONFIG_NAME, load_env, prepare_run_dir, validate_config
from crossstate_ecg.utils.log import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _split_out(out: str, suffix: str, default_name: str) -> Tuple[Path, Path]:
    """An --out ending in `suffix` names the file; otherwise it is the run directory"""
    out = Path(out)
    if out.suffix == suffix:
        return out.parent, out
    return out, out / default_name


def _config_for_model(model_dir: Path, config_path: Optional[str]) -> RunConfig:
    if config_path:
        return validate_config(config_path)
    stored = model_dir / RUN_CONFIG_NAME
    return validate_config(stored if stored.is_file() else None)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    manifest = data_io.synth_dataset(
        n_subjects=args.subjects,
        rest_sec=args.rest_sec,
        ex_sec=args.ex_sec,
        seed=args.seed,
        out_dir=args.out,
        chunk_sec=args.chunk_sec,
        fs_hz=args.fs,
        noise_std=args.noise,
    )
    _emit({"out": str(args.out), "subjects": len(manifest.subjects()), "records": len(manifest.records)})
    return EXIT_OK


def cmd_preprocess(args) -> int:
    config = validate_config(args.config)
    pipeline = CrossStatePipeline(config, args.data)
    index_path, quality = pipeline.preprocess_dataset(args.out)
    if args.report:
        report_path = Path(args.report)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(quality.model_dump_json(indent=2))
    _emit({"index": str(index_path), "quality": quality.model_dump(mode="json")})
    return EXIT_OK


def cmd_train(args) -> int:
    config = validate_config(args.config)
    out_dir = prepare_run_dir(args.out, config, force=args.force)
    pipeline = CrossStatePipeline(config, args.data)
    trained = pipeline.train(SplitMode(args.mode), out_dir, args.ablation)
    _emit({"out": str(out_dir), "best_epoch": trained.fit.best_epoch,
           "best_val_loss": trained.fit.best_val_loss, "subjects": trained.fit.classes})
    return EXIT_OK


def cmd_eval(args) -> int:
    config = validate_config(args.config)
    run_dir, report_path = _split_out(args.out, ".json", "report.json")
    prepare_run_dir(run_dir, config, force=args.force)
    pipeline = CrossStatePipeline(config, args.data)
    report = run_scenario(pipeline, SplitMode(args.mode), run_dir, args.ablation)
    if report_path.name != "report.json":
        report_path.write_text(report.model_dump_json(indent=2))
    _emit(report.model_dump(mode="json"))
    return EXIT_OK


def cmd_ablation(args) -> int:
    config = validate_config(args.config)
    run_dir, table_path = _split_out(args.out, ".csv", "table.csv")
    prepare_run_dir(run_dir, config, force=args.force)
    pipeline = CrossStatePipeline(config, args.data)
    reports = run_ablation(pipeline, run_dir, names=args.names, mode=SplitMode(args.mode))
    if table_path.name != "table.csv":
        (run_dir / "table.csv").replace(table_path)
    _emit([r.model_dump(mode="json") for r in reports])
    return EXIT_OK


def cmd_enroll(args) -> int:
    model_dir = Path(args.model)
    config = _config_for_model(model_dir, args.config)
    net, _ = CrossStateNet.load(model_dir)
    pipeline = CrossStatePipeline(config, args.data)
    train_refs, val_refs, _ = pipeline.partition(SplitMode(args.mode or config.split.mode))
    gallery = pipeline.enroll(net, pipeline.segments_for(train_refs), pipeline.segments_for(val_refs),
                              model_dir=model_dir.resolve())
    save_gallery(gallery, args.out)
    _emit({"gallery": str(args.out), "users": sorted(gallery.users),
           "tau_p": {u: e.tau_p for u, e in sorted(gallery.users.items())}})
    return EXIT_OK


def _probe(gallery, probe_path: str, model: Optional[str]) -> np.ndarray:
    path = Path(probe_path)
    if path.suffix == ".json":
        if not path.is_file():
            raise MissingFile(f"Probe not found: {path}", {"path": str(path)})
        vector = np.asarray(json.loads(path.read_text()), dtype=float).ravel()
        return vector / max(float(np.linalg.norm(vector)), 1e-300)
    model_dir = Path(model or gallery.model_dir or "")
    if not (model_dir / "model.json").is_file():
        raise InsufficientData("Record probes need the model directory (--model or gallery model_dir)")
    config = _config_for_model(model_dir, None)
    net, _ = CrossStateNet.load(model_dir)
    return probe_embedding(net, path, Preprocessor(config.preprocess))


def cmd_verify(args) -> int:
    gallery = load_gallery(args.gallery)
    probe = _probe(gallery, args.probe, args.model)
    result = verify_user(gallery, args.user, probe)
    _emit(result.model_dump(mode="json"))
    return EXIT_OK if result.decision == Decision.ACCEPT else EXIT_FAILURE


def cmd_identify(args) -> int:
    gallery = load_gallery(args.gallery)
    probe = _probe(gallery, args.probe, args.model)
    result = identify(probe, gallery_templates(gallery))
    _emit(result.model_dump(mode="json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossstate-ecg",
        description="ECG biometric identification and verification across rest and post-exercise states",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="Override CSECG_LOG_LEVEL")
    parser.add_argument("--log-format", choices=["text", "json"], default=None, help="Override CSECG_LOG_FORMAT")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    modes = [m.value for m in SplitMode]

    p = sub.add_parser("synth", help="Write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--rest-sec", type=float, default=300.0)
    p.add_argument("--ex-sec", type=float, default=300.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--fs", type=float, default=300.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--chunk-sec", type=float, default=30.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="Segment every record of a dataset")
    p.add_argument("--in", "--data", dest="data", default=None, help="Dataset directory")
    p.add_argument("--out", default=None, help="Segment directory (default <data>/segments)")
    p.add_argument("--report", default=None, help="Write the merged quality report here")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_preprocess)

    for name, func, help_text in (
        ("train", cmd_train, "Train a network for one scenario"),
        ("eval", cmd_eval, "Train and evaluate one scenario"),
        ("ablation", cmd_ablation, "Run the ablation series"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None)
        p.add_argument("--data", default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--mode", choices=modes,
                       default=SplitMode.REST2EXERCISE.value)
        p.add_argument("--force", action="store_true", help="Overwrite a run with a different config")
        if name == "ablation":
            p.add_argument("--names", nargs="+", choices=sorted(ABLATIONS), default=sorted(ABLATIONS))
        else:
            p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("enroll", help="Build a gallery from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=modes, default=None)
    p.set_defaults(func=cmd_enroll)

    for name, func, help_text in (
        ("verify", cmd_verify, "Verify a probe against one enrolled user"),
        ("identify", cmd_identify, "Find the closest enrolled user"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--gallery", required=True)
        p.add_argument("--probe", required=True, help=".ecg record or JSON embedding")
        p.add_argument("--model", default=None, help="Model directory (defaults to the gallery's)")
        if name == "verify":
            p.add_argument("--user", required=True)
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Dispatch a command

    Returns:
        0 on success, 1 on failure or rejected verification, 2 on usage or config errors
    """
    load_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    setup_logging(args.log_level, args.log_format)
    try:
        return args.func(args)
    except ConfigError as e:
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return EXIT_USAGE
    except CrossStateError as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
