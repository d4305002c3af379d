"""Pipeline configuration files (TOML or JSON, auto-detected by extension)."""
from __future__ import annotations

import json
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 fallback
    import tomli as tomllib

from .errors import ConfigError
from .losses import LossConfig, StageCombo
from .pipeline import COARSE_I, COARSE_II, FINE_TUMOR, PipelineConfig, PredictorHandle, \
    PreprocessSettings, STAGE_IDS, StageConfig
from .postprocess import PostprocessConfig
from .preprocess import ForegroundStats

DEFAULT_PATCH_SIZES = {COARSE_I: (160, 128, 112), COARSE_II: (160, 128, 112),
                       FINE_TUMOR: (80, 80, 80)}
DEFAULT_NUM_CLASSES = {COARSE_I: 5, COARSE_II: 5, FINE_TUMOR: 2}
DEFAULT_TARGET_SPACING = (0.63281, 0.63281, 0.63281)


def _get(table: dict, key_path: str, default=None, required: bool = False):
    node = table
    for part in key_path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(key_path, "missing required key")
            return default
        node = node[part]
    return node


def load_raw_config(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(str(path), f"unparseable config: {exc}") from exc


def _stage_from_table(stage_id: str, table: dict) -> tuple[StageConfig, PredictorHandle]:
    key = f"stages.{stage_id}"
    try:
        loss_table = table.get("loss")
        loss = None
        if loss_table:
            loss = LossConfig(threshold=float(loss_table.get("threshold", 0.1)),
                              epsilon=float(loss_table.get("epsilon", 1e-5)),
                              stage_combo=StageCombo(loss_table.get("stage_combo", "coarse_i")),
                              combo_weights=tuple(loss_table.get("combo_weights", (1.0, 1.0))))
        stage = StageConfig(
            stage_id=stage_id,
            patch_size=tuple(table.get("patch_size", DEFAULT_PATCH_SIZES[stage_id])),
            num_classes=int(table.get("num_classes", DEFAULT_NUM_CLASSES[stage_id])),
            overlap_fraction=float(table.get("overlap_fraction", 0.5)),
            blend=table.get("blend", "gaussian"),
            loss=loss)
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, str(exc)) from exc
    pred_table = table.get("predictor")
    if not isinstance(pred_table, dict):
        raise ConfigError(f"{key}.predictor", "missing predictor table")
    try:
        handle = PredictorHandle(kind=pred_table.get("kind", "stub-oracle"),
                                 endpoint=str(pred_table.get("endpoint", "ideal")),
                                 capacity=int(pred_table.get("capacity", 1)))
    except ValueError as exc:
        raise ConfigError(f"{key}.predictor", str(exc)) from exc
    return stage, handle


def pipeline_config_from_dict(raw: dict, *, base_dir: Path | None = None) -> PipelineConfig:
    base_dir = base_dir or Path(".")
    try:
        target_spacing = tuple(float(s) for s in raw.get("target_spacing", DEFAULT_TARGET_SPACING))
    except (TypeError, ValueError) as exc:
        raise ConfigError("target_spacing", str(exc)) from exc

    stages = {}
    stage_tables = raw.get("stages")
    if not isinstance(stage_tables, dict):
        raise ConfigError("stages", "missing stages table")
    for stage_id in STAGE_IDS:
        table = stage_tables.get(stage_id)
        if table is None:
            raise ConfigError(f"stages.{stage_id}", "stage not configured")
        stages[stage_id] = _stage_from_table(stage_id, table)

    pre_table = raw.get("preprocess", {})
    stats = None
    if all(k in pre_table for k in ("mean", "std")):
        try:
            stats = ForegroundStats(mean=float(pre_table["mean"]), std=float(pre_table["std"]),
                                    voxel_count=int(pre_table.get("voxel_count", 1)))
        except ValueError as exc:
            raise ConfigError("preprocess", str(exc)) from exc
    try:
        preprocess = PreprocessSettings(
            stats=stats,
            crop_expansion=float(pre_table.get("crop_expansion", 1.25)),
            foreground_hu_threshold=float(pre_table.get("foreground_hu_threshold", 0.0)))
    except ValueError as exc:
        raise ConfigError("preprocess", str(exc)) from exc

    pp_table = raw.get("postprocess", {})
    try:
        postprocess = PostprocessConfig(
            vein_max_dist=float(pp_table.get("vein_max_dist", 100.0)),
            artery_max_dist=float(pp_table.get("artery_max_dist", 92.0)),
            artery_hu_max=float(pp_table.get("artery_hu_max", 2200.0)),
            tumor_min_size=int(pp_table.get("tumor_min_size", 100)),
            cyst_hu_threshold=float(pp_table.get("cyst_hu_threshold", 20.0)),
            ensemble_weights=tuple(pp_table.get("ensemble_weights", (0.4, 0.6))),
            thin_block=tuple(pp_table.get("thin_block", (3, 3, 3))),
            thin_density_max=float(pp_table.get("thin_density_max", 0.5)),
            fusion_precedence=tuple(pp_table.get("fusion_precedence",
                                                 ("tumor", "artery", "vein", "kidney"))),
            distance_unit=pp_table.get("distance_unit", "voxel"),
            hu_aggregate=pp_table.get("hu_aggregate", "mean"),
            connectivity=int(pp_table.get("connectivity", 26)))
    except ValueError as exc:
        raise ConfigError("postprocess", str(exc)) from exc

    output_dir = raw.get("output_dir")
    if output_dir is not None:
        output_dir = Path(output_dir)
        if not output_dir.is_absolute():
            output_dir = base_dir / output_dir
    try:
        return PipelineConfig(target_spacing=target_spacing, stages=stages,
                              preprocess=preprocess, postprocess=postprocess,
                              output_dir=output_dir, seed=int(raw.get("seed", 0)))
    except ValueError as exc:
        raise ConfigError("pipeline", str(exc)) from exc


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    return pipeline_config_from_dict(load_raw_config(path), base_dir=path.parent)
