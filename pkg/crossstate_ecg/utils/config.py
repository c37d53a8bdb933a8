"""
Run configuration
Loading, validation, content digests and run-directory bookkeeping
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from crossstate_ecg.core.errors import ConfigError, RunDirConflict
from crossstate_ecg.models.schemas import RunConfig

logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = "run_config.json"


def load_env() -> None:
    """Read a .env file into the process environment without overriding it"""
    load_dotenv(override=False)


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_of(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def config_digest(config: RunConfig) -> str:
    """sha256 over the canonical JSON of the config without its digest"""
    return sha256_of(config.model_dump(mode="json", exclude={"digest"}))


def split_digest(*parts: Iterable) -> str:
    """sha256 over the record paths of each partition, in order"""
    return sha256_of([sorted(getattr(ref, "path", ref) for ref in part) for part in parts])


def _violations(error: ValidationError) -> list:
    return [
        {"field": ".".join(str(p) for p in e["loc"]) or "<root>", "message": e["msg"]}
        for e in error.errors()
    ]


def build_config(payload: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Validate a config mapping and apply environment overrides

    CSECG_SEED overrides train.seed; CSECG_DATA_DIR fills data_dir when unset.

    Args:
        payload: Partial or complete RunConfig mapping

    Returns:
        RunConfig with defaults filled and digest computed
    """
    payload = dict(payload or {})
    payload.pop("digest", None)
    seed = os.getenv("CSECG_SEED")
    if seed is not None:
        try:
            seed_value = int(seed)
        except ValueError:
            raise ConfigError("CSECG_SEED must be an integer", {"fields": [{"field": "CSECG_SEED", "message": seed}]})
        payload["train"] = {**payload.get("train", {}), "seed": seed_value}
    if not payload.get("data_dir") and os.getenv("CSECG_DATA_DIR"):
        payload["data_dir"] = os.getenv("CSECG_DATA_DIR")
    try:
        config = RunConfig.model_validate(payload)
    except ValidationError as e:
        violations = _violations(e)
        fields = ", ".join(v["field"] for v in violations)
        raise ConfigError(f"Invalid run configuration ({fields})", {"fields": violations}) from e
    return config.model_copy(update={"digest": config_digest(config)})


def validate_config(path=None) -> RunConfig:
    """
    Load and validate a run config file

    A missing path yields the all-default configuration; an empty file likewise.

    Args:
        path: JSON file

    Returns:
        RunConfig
    """
    if path is None:
        return build_config({})
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}", {"fields": [{"field": "<file>", "message": str(path)}]})
    text = path.read_text().strip()
    try:
        payload = json.loads(text) if text else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e.msg}",
                          {"fields": [{"field": "<file>", "message": f"line {e.lineno}: {e.msg}"}]}) from e
    if not isinstance(payload, dict):
        raise ConfigError("Config file must hold a JSON object", {"fields": [{"field": "<root>", "message": type(payload).__name__}]})
    return build_config(payload)


def prepare_run_dir(out_dir, config: RunConfig, force: bool = False) -> Path:
    """
    Create a run directory and record its resolved config

    A directory already holding a config with a different digest is refused
    unless `force` is set.

    Args:
        out_dir: Run directory
        config: Resolved configuration
        force: Overwrite a conflicting run

    Returns:
        The run directory
    """
    out_dir = Path(out_dir)
    existing = out_dir / RUN_CONFIG_NAME
    if existing.is_file():
        try:
            previous = json.loads(existing.read_text()).get("digest")
        except (json.JSONDecodeError, AttributeError):
            previous = None
        if previous != config.digest and not force:
            raise RunDirConflict(
                f"{out_dir} holds a run with a different config; pass --force to overwrite",
                {"existing_digest": previous, "new_digest": config.digest},
            )
        if previous != config.digest:
            logger.warning("Overwriting run in %s (digest %s -> %s)", out_dir, previous, config.digest)
    out_dir.mkdir(parents=True, exist_ok=True)
    existing.write_text(config.model_dump_json(indent=2))
    return out_dir
