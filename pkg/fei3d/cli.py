"""命令行入口: `fei3d <子命令> [参数]`

配置优先级: 默认值 < `--config` JSON 文件 < 显式参数。`--threads` 缺省时读取环境变量
`FEI3D_THREADS`。每次运行向输出目录写入 `config.json`、`history.jsonl`、
`metrics.json`、`report.txt`，训练命令另写 `model.ckpt` 与 `predictions.csv`；
失败时写 `error.json` 并以非零状态退出。
"""
import argparse
import json
import os
from pathlib import Path
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .data import (
    align,
    class_frequencies,
    load_features,
    load_param_dataset,
    load_predictions,
    ParamDataset,
    PredictionSet,
    predictions_from_outputs,
    save_param_dataset,
    save_predictions,
    split_dataset,
    synth_generate,
)
from .exception import (
    ConfigurationError,
    DataError,
    Fei3dError,
    NumericalError,
    SchemaError,
    ShapeError,
    UsageError,
    WriteError,
)
from .fusion import (
    fuse_predictions,
    fusion_dataset,
    IntermediateFusionModel,
    parse_grid,
    sweep_fusion_weight,
)
from .handle import CommandHandler
from .log import configure_logging, logger
from .losses import (
    class_weights_from_counts,
    combined_affectnet_loss,
    mse_loss,
    select_objective,
    softmax_cross_entropy,
    stage1_combined_loss,
    stage2_va_loss,
    weighted_cross_entropy,
)
from .metrics import (
    classification_report,
    format_sweep,
    regression_report,
    render_report,
)
from .models import (
    CheckpointMeta,
    EpochRecord,
    HeadKind,
    HeadSpec,
    LossWeights,
    MetricsReport,
    RunConfig,
)
from .morphviz import (
    decode_mesh,
    export_obj,
    load_asset,
    load_param_rows,
    make_toy_asset,
    save_asset,
)
from .nn import build_classifier, grad_check, LossFn, Model
from .numerics import RngState
from .store import get_command, store_command
from .training import (
    fit,
    fit_two_stage_va,
    load_checkpoint,
    ObjectiveSelector,
    save_checkpoint,
    write_history,
)
from .typing import T_Command
from .utils import escape_tag

import numpy as np
import pandas as pd
from pydantic import ValidationError

THREADS_ENV = "FEI3D_THREADS"
INIT_STREAM = 4
"""模型初始化使用的随机流编号，与训练循环的流互不重叠"""

Artifacts = Dict[str, Any]


def command(
    name: str,
    help: str = "",
    required: Sequence[str] = (),
) -> Callable[[T_Command], T_Command]:
    """注册子命令处理函数

    参数:
        name: 子命令名
        help: 帮助文本
        required: 必须给出的配置项
    """

    def _decorator(func: T_Command) -> T_Command:
        store_command(
            CommandHandler(name=name, func=func, help=help, required=tuple(required)),
        )
        return func

    return _decorator


# 参数解析
class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message, token=message.rsplit(": ", 1)[-1])


def _common_flags() -> argparse.ArgumentParser:
    parent = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    parent.add_argument("--config", help="JSON config file")
    parent.add_argument("--seed", type=int)
    parent.add_argument("--threads", type=int)
    parent.add_argument("--log-level", dest="log_level")
    parent.add_argument("--out", help="output directory")
    parent.add_argument(
        "--report-formats",
        dest="report_formats",
        nargs="+",
        choices=["json", "txt"],
    )
    return parent


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="training set")
    p.add_argument("--val", help="validation set")
    p.add_argument("--test", help="held-out set for predictions.csv")
    p.add_argument("--kind", help="emoca_short | emoca_full | smirk_short | ...")
    p.add_argument("--head", help="raf_db_7 | affectnet_8_va | va_only_2 | custom(n)")
    p.add_argument("--two-stage", dest="two_stage", action="store_true")
    p.add_argument(
        "--no-class-weights",
        dest="class_weighting",
        action="store_false",
    )
    p.add_argument("--batch", dest="train.batch_size", type=int)
    p.add_argument("--epochs", dest="train.max_epochs", type=int)
    p.add_argument("--patience", dest="train.patience", type=int)
    p.add_argument("--wd", dest="train.weight_decay", type=float)
    p.add_argument("--base-lr", dest="train.base_lr", type=float)
    p.add_argument("--max-lr", dest="train.max_lr", type=float)
    p.add_argument("--step-size", dest="train.step_size", type=int)
    p.add_argument(
        "--scheduler",
        dest="train.scheduler_mode",
        choices=["triangular", "triangular2", "exp_range"],
    )
    p.add_argument("--scheduler-gamma", dest="train.scheduler_gamma", type=float)
    p.add_argument("--hidden", dest="train.hidden_width", type=int)
    p.add_argument("--w1", dest="va_loss.w1", type=float)
    p.add_argument("--w2", dest="va_loss.w2", type=float)
    p.add_argument(
        "--ccc-literal",
        dest="va_loss.ccc_as_one_minus",
        action="store_false",
    )


def _add_prediction_pair_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--a", help="2D model predictions")
    p.add_argument("--b", help="3D model predictions")
    p.add_argument("--labels", help="dataset holding the ground truth")
    p.add_argument("--from-logits", dest="from_logits", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parent = _common_flags()
    parser = _Parser(prog="fei3d", argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str) -> argparse.ArgumentParser:
        handler = get_command(name)
        return sub.add_parser(
            name,
            parents=[parent],
            help=handler.help if handler else None,
            argument_default=argparse.SUPPRESS,
        )

    _add_train_flags(add("train-3d"))

    p = add("train-intermediate")
    _add_train_flags(p)
    p.add_argument("--features", help="2D features of the training set")
    p.add_argument("--val-features", dest="val_features")
    p.add_argument("--test-features", dest="test_features")
    p.add_argument("--proj-dim", dest="proj_dim", type=int)

    p = add("fuse-late")
    _add_prediction_pair_flags(p)
    p.add_argument(
        "--strategy",
        dest="strategy.kind",
        choices=["max", "min", "mean", "weighted"],
    )
    p.add_argument("--w", dest="strategy.w", type=float)
    p.add_argument("--macro", choices=["all", "present"])

    p = add("evaluate")
    p.add_argument("--preds")
    p.add_argument("--checkpoint")
    p.add_argument("--labels")
    p.add_argument("--kind")
    p.add_argument("--features", help="2D features for an intermediate model")
    p.add_argument("--from-logits", dest="from_logits", action="store_true")
    p.add_argument("--macro", choices=["all", "present"])

    p = add("sweep")
    _add_prediction_pair_flags(p)
    p.add_argument("--grid", help="lo:hi:step or comma separated weights")
    p.add_argument("--objective", choices=["accuracy", "f1_macro", "ccc", "rmse"])

    p = add("gradcheck")
    p.add_argument("--input-dim", dest="gradcheck_input_dim", type=int)
    p.add_argument("--hidden", dest="gradcheck_hidden", type=int)
    p.add_argument("--rows", dest="gradcheck_rows", type=int)
    p.add_argument("--h", dest="gradcheck_h", type=float)
    p.add_argument("--tolerance", dest="gradcheck_tolerance", type=float)

    p = add("synth")
    p.add_argument("--n-train", dest="synth.n_samples", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--dim", dest="synth.dim", type=int)
    p.add_argument("--classes", dest="synth.n_classes", type=int)
    p.add_argument("--kind", dest="synth.kind")
    p.add_argument(
        "--label-space",
        dest="synth.label_space",
        choices=["raf7", "affect8"],
    )
    p.add_argument("--separation", dest="synth.separation", type=float)
    p.add_argument("--noise", dest="synth.noise", type=float)
    p.add_argument("--with-va", dest="synth.with_va", action="store_true")
    p.add_argument("--va-noise", dest="synth.va_noise", type=float)
    p.add_argument("--va-scale", dest="synth.va_scale", type=float)
    p.add_argument(
        "--toy-asset",
        dest="toy_asset",
        type=_triple,
        help="V:S:E, also write a random morphable asset",
    )

    p = add("decode-mesh")
    p.add_argument("--asset")
    p.add_argument("--params", help="rows `shape,...` and `expr,...`")
    return parser


def _triple(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(":")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected V:S:E, got {text!r}") from e
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected V:S:E, got {text!r}")
    return values


def _unflatten(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        *parents, leaf = key.split(".")
        node = nested
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_config_file(path: Path) -> Dict[str, Any]:
    try:
        values = json.loads(path.read_text())
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}", token=str(path)) from e
    except ValueError as e:
        raise UsageError(f"config file {path} is not JSON: {e}", token=str(path)) from e
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold an object", token=str(path))
    return values


def parse_and_validate(
    argv: Optional[Sequence[str]] = None,
    config_file: Optional[Path] = None,
) -> RunConfig:
    """解析命令行参数并合并配置文件

    参数:
        argv: 命令行参数，不含程序名；为 None 时读取 `sys.argv`
        config_file: 未给出 `--config` 时使用的配置文件

    返回:
        RunConfig: 完整解析后的配置
    """
    args = vars(build_parser().parse_args(argv))
    name = args.pop("command")
    config_path = args.pop("config", None) or config_file
    values = _read_config_file(Path(config_path)) if config_path else {}
    if values.get("command", name) != name:
        raise UsageError(
            f"config file is for {values['command']!r}, not {name!r}",
            token=name,
        )
    flags = _unflatten(args)
    if "strategy" in flags:
        values.pop("strategy", None)
    values = _merge(values, flags)
    values["command"] = name
    if "threads" not in values and (env := os.environ.get(THREADS_ENV)):
        values["threads"] = env
    try:
        cfg = RunConfig.parse_obj(values)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(part) for part in first["loc"] if part != "__root__")
        token = first["msg"].split()[0] if not loc else f"--{loc.replace('_', '-')}"
        raise UsageError(f"invalid configuration: {first['msg']}", token=token) from e

    handler = get_command(name)
    if handler is None:
        raise UsageError(f"unknown command {name!r}", token=name)
    if missing := handler.missing(cfg):
        flag = f"--{missing[0].replace('_', '-')}"
        raise UsageError(f"missing required flag {flag}", token=flag)
    if cfg.command == "evaluate" and (cfg.preds is None) == (cfg.checkpoint is None):
        raise UsageError(
            "evaluate takes exactly one of --preds, --checkpoint",
            token="--preds",
        )
    if cfg.two_stage and cfg.head not in (None, HeadKind.AFFECTNET_8_VA.value):
        raise UsageError("--two-stage trains the affectnet_8_va head", token="--head")
    return cfg


def run_directory(cfg: RunConfig) -> Path:
    """输出目录；`decode-mesh` 的 `--out` 是 OBJ 文件，目录取其父目录"""
    if cfg.out is None:
        raise UsageError("missing required flag --out", token="--out")
    return cfg.out.parent if cfg.command == "decode-mesh" else cfg.out


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def execute(cfg: RunConfig) -> Artifacts:
    """执行子命令并写出历史、指标与报告"""
    handler = get_command(cfg.command)
    if handler is None:
        raise UsageError(f"unknown command {cfg.command!r}", token=cfg.command)
    artifacts = handler.run(cfg)
    out = run_directory(cfg)
    try:
        write_history(out / "history.jsonl", artifacts.get("history", []))
        if "json" in cfg.report_formats:
            _write_json(out / "metrics.json", artifacts.get("metrics", {}))
        if "txt" in cfg.report_formats:
            (out / "report.txt").write_text(artifacts.get("report", ""))
    except OSError as e:
        raise WriteError(f"cannot write run artifacts to {out}: {e}") from e
    return artifacts


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = parse_and_validate(argv)
        configure_logging(cfg.log_level)
    except (UsageError, ConfigurationError) as e:
        logger.error(escape_tag(e.message))
        sys.stderr.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        return 2
    out = run_directory(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.json(indent=2, sort_keys=True) + "\n")
    except OSError as e:
        logger.error(escape_tag(f"Cannot prepare {out}: {e}"))
        return 1
    try:
        execute(cfg)
    except Fei3dError as e:
        _write_json(out / "error.json", e.to_dict())
        logger.error(escape_tag(f"{cfg.command} failed: {e.message}"))
        return 1
    return 0


# 共用步骤
def _default_head(ds: ParamDataset) -> HeadSpec:
    if ds.label_space == "raf7":
        return HeadSpec(kind=HeadKind.RAF_DB_7)
    if ds.va is not None:
        return HeadSpec(kind=HeadKind.AFFECTNET_8_VA)
    return HeadSpec(kind=HeadKind.CUSTOM, n=ds.n_classes)


def _selector(cfg: RunConfig, train: ParamDataset, head: HeadSpec) -> ObjectiveSelector:
    """加权交叉熵只用于单分类头；组合损失与 VA 损失不带类别权重"""
    weights = None
    if cfg.class_weighting and not head.has_va:
        weights = class_weights_from_counts(class_frequencies(train))
        logger.info(f"Class weights: {[round(w, 4) for w in weights.values]}")
    return lambda h, rng: select_objective(h, rng, class_weights=weights)


def _report_for(
    preds: PredictionSet,
    truth: ParamDataset,
    title: str,
    macro: str = "all",
) -> MetricsReport:
    """按 id 对齐预测与真值后计算可用的指标"""
    pairs = align(truth.ids, preds.ids)
    classification = regression = None
    if preds.probs is not None:
        if preds.n_classes != truth.n_classes:
            raise ShapeError(
                f"{preds.source} scores {preds.n_classes} classes, "
                f"{truth.label_space} has {truth.n_classes}",
            )
        classification = classification_report(
            truth.labels[pairs.left],
            preds.probs[pairs.right].argmax(axis=1),
            truth.n_classes,
            macro,  # type: ignore[arg-type]
        )
    if preds.va is not None and truth.va is not None:
        regression = regression_report(preds.va[pairs.right], truth.va[pairs.left])
    if classification is None and regression is None:
        raise SchemaError(f"{preds.source} has nothing to compare with the labels")
    return MetricsReport(
        title=title,
        classification=classification,
        regression=regression,
    )


def _train_artifacts(
    cfg: RunConfig,
    model: Model,
    history: List[EpochRecord],
    eval_set: ParamDataset,
    eval_name: str,
    eval_features: Optional[np.ndarray] = None,
) -> Artifacts:
    out = run_directory(cfg)
    last_stage = history[-1].stage if history else 1
    final = [r for r in history if r.stage == last_stage]
    best = min(final, key=lambda r: (r.val_loss, r.epoch)) if final else None
    meta = CheckpointMeta(
        epoch=best.epoch if best else 0,
        best_val_loss=best.val_loss if best else None,
        seed=cfg.seed,
    )
    save_checkpoint(model, meta, out / "model.ckpt")
    features = eval_set.features if eval_features is None else eval_features
    outputs = model.predict(features, threads=cfg.threads)
    preds = predictions_from_outputs(eval_set.ids, outputs, model.head, cfg.command)
    save_predictions(preds, out / "predictions.csv")
    report = _report_for(preds, eval_set, f"{cfg.command} ({eval_name})", cfg.macro)
    return {
        "history": history,
        "metrics": {
            "checkpoint": meta.dict(),
            "evaluated_on": eval_name,
            "head": str(model.head),
            **report.dict(),
        },
        "report": render_report([(str(model.head), report)]),
    }


# 子命令
@command(
    "train-3d",
    help="train the MLP on 3D face parameters",
    required=("data", "val", "kind", "out"),
)
def train_3d(cfg: RunConfig) -> Artifacts:
    train = load_param_dataset(cfg.data, cfg.kind)  # type: ignore[arg-type]
    val = load_param_dataset(cfg.val, cfg.kind)  # type: ignore[arg-type]
    if train.label_space != val.label_space:
        raise DataError(
            f"training set uses {train.label_space}, validation set {val.label_space}",
        )
    head = HeadSpec.parse(cfg.head) if cfg.head else _default_head(train)
    init_rng = RngState(cfg.seed).split(INIT_STREAM + 1)[INIT_STREAM]
    model = build_classifier(
        train.dim,
        head,
        init_rng,
        hidden_width=cfg.train.hidden_width,
        negative_slope=cfg.train.negative_slope,
    )
    if cfg.two_stage:
        model, history = fit_two_stage_va(
            model,
            train,
            cfg.train,
            cfg.va_loss,
            val,
            threads=cfg.threads,
        )
    else:
        model, history = fit(
            model,
            train,
            _selector(cfg, train, head),
            cfg.train,
            val,
            threads=cfg.threads,
        )
    if cfg.test is not None:
        return _train_artifacts(
            cfg,
            model,
            history,
            load_param_dataset(cfg.test, cfg.kind),
            "test",
        )
    return _train_artifacts(cfg, model, history, val, "val")


@command(
    "train-intermediate",
    help="train the feature-fusion model on 2D features and 3D parameters",
    required=("features", "val_features", "data", "val", "kind", "out"),
)
def train_intermediate(cfg: RunConfig) -> Artifacts:
    params = load_param_dataset(cfg.data, cfg.kind)  # type: ignore[arg-type]
    features_2d = load_features(cfg.features, "2d")  # type: ignore[arg-type]
    train = fusion_dataset(features_2d, params)
    val = fusion_dataset(
        load_features(cfg.val_features, "2d"),  # type: ignore[arg-type]
        load_param_dataset(cfg.val, cfg.kind),  # type: ignore[arg-type]
    )
    head = HeadSpec.parse(cfg.head) if cfg.head else _default_head(params)
    init_rng = RngState(cfg.seed).split(INIT_STREAM + 1)[INIT_STREAM]
    model = IntermediateFusionModel(
        features_2d.dim,
        params.dim,
        head,
        init_rng,
        proj_dim=cfg.proj_dim,
        hidden_width=cfg.train.hidden_width,
        negative_slope=cfg.train.negative_slope,
    )
    if cfg.two_stage:
        model, history = fit_two_stage_va(
            model,  # type: ignore[arg-type]
            train,
            cfg.train,
            cfg.va_loss,
            val,
            threads=cfg.threads,
        )
    else:
        model, history = fit(
            model,
            train,
            _selector(cfg, train, head),
            cfg.train,
            val,
            threads=cfg.threads,
        )
    if cfg.test is not None:
        if cfg.test_features is None:
            raise UsageError("--test needs --test-features", token="--test-features")
        test = fusion_dataset(
            load_features(cfg.test_features, "2d"),
            load_param_dataset(cfg.test, cfg.kind),
        )
        return _train_artifacts(cfg, model, history, test, "test")
    return _train_artifacts(cfg, model, history, val, "val")


@command(
    "fuse-late",
    help="combine the outputs of a 2D and a 3D model",
    required=("a", "b", "strategy", "out"),
)
def fuse_late(cfg: RunConfig) -> Artifacts:
    a = load_predictions(cfg.a, cfg.from_logits)  # type: ignore[arg-type]
    b = load_predictions(cfg.b, cfg.from_logits)  # type: ignore[arg-type]
    strategy = cfg.strategy
    if strategy is None:
        raise UsageError("missing required flag --strategy", token="--strategy")
    fused = fuse_predictions(a, b, strategy)
    fused = fused.copy(update={"source": str(strategy)})
    save_predictions(fused, run_directory(cfg) / "predictions.csv")
    metrics: Dict[str, Any] = {"strategy": strategy.dict(), "n_fused": len(fused)}
    report = ""
    if cfg.labels is not None:
        truth = load_param_dataset(cfg.labels)
        rows = [
            (name, _report_for(preds, truth, name, cfg.macro))
            for name, preds in ((a.source, a), (b.source, b), (str(strategy), fused))
        ]
        for key, (_, row) in zip(("a", "b", "fused"), rows):
            metrics[key] = row.dict()
        report = render_report(rows)
    return {"metrics": metrics, "report": report}


@command(
    "evaluate",
    help="score predictions or a checkpoint against labels",
    required=("labels", "out"),
)
def evaluate(cfg: RunConfig) -> Artifacts:
    truth = load_param_dataset(cfg.labels, cfg.kind)  # type: ignore[arg-type]
    if cfg.preds is not None:
        preds = load_predictions(cfg.preds, cfg.from_logits)
    else:
        model = load_checkpoint(cfg.checkpoint)  # type: ignore[arg-type]
        if isinstance(model, IntermediateFusionModel):
            if cfg.features is None:
                raise UsageError(
                    "an intermediate-fusion checkpoint needs --features",
                    token="--features",
                )
            truth = fusion_dataset(load_features(cfg.features, "2d"), truth)
        outputs = model.predict(truth.features, threads=cfg.threads)
        preds = predictions_from_outputs(truth.ids, outputs, model.head, "checkpoint")
        save_predictions(preds, run_directory(cfg) / "predictions.csv")
    report = _report_for(preds, truth, preds.source, cfg.macro)
    return {"metrics": report.dict(), "report": render_report([(preds.source, report)])}


@command(
    "sweep",
    help="grid-search the weighted late-fusion weight",
    required=("a", "b", "labels", "out"),
)
def sweep(cfg: RunConfig) -> Artifacts:
    a = load_predictions(cfg.a, cfg.from_logits)  # type: ignore[arg-type]
    b = load_predictions(cfg.b, cfg.from_logits)  # type: ignore[arg-type]
    truth = load_param_dataset(cfg.labels)  # type: ignore[arg-type]
    objective = cfg.objective or (
        "accuracy" if a.probs is not None and b.probs is not None else "ccc"
    )
    pairs = align(a.ids, b.ids)
    a, b = a.subset(pairs.left), b.subset(pairs.right)
    rows = align(a.ids, truth.ids)
    a, b = a.subset(rows.left), b.subset(rows.left)
    if objective in ("ccc", "rmse"):
        if a.va is None or b.va is None or truth.va is None:
            raise SchemaError(f"{objective} sweep needs VA in both sources and labels")
        pred_a, pred_b, targets = a.va, b.va, truth.va[rows.right]
    else:
        if a.probs is None or b.probs is None:
            raise SchemaError(f"{objective} sweep needs class probabilities")
        pred_a, pred_b, targets = a.probs, b.probs, truth.labels[rows.right]
    result = sweep_fusion_weight(
        pred_a,
        pred_b,
        targets,
        parse_grid(cfg.grid),
        objective,  # type: ignore[arg-type]
    )
    return {"metrics": result.dict(), "report": format_sweep(result)}


def _gradcheck_cases(
    cfg: RunConfig,
    rng: RngState,
) -> List[Tuple[str, HeadSpec, LossFn]]:
    n_classes = 7
    weights = rng.uniform(0.5, 2.0, size=n_classes)
    fixed = LossWeights(alpha=0.3, beta=0.5, gamma=0.2)

    def split_va(outputs: np.ndarray, c: int):
        return outputs[:, :c], outputs[:, c:]

    def combined(outputs, targets):
        logits, va = split_va(outputs, 8)
        loss, (g_logits, g_va) = combined_affectnet_loss(logits, va, *targets, fixed)
        return loss, np.concatenate([g_logits, g_va], axis=1)

    def stage1(outputs, targets):
        logits, va = split_va(outputs, 8)
        loss, (g_logits, g_va) = stage1_combined_loss(
            logits,
            va,
            *targets,
            np.resize(weights, 8),
            cfg.va_loss,
        )
        return loss, np.concatenate([g_logits, g_va], axis=1)

    raf = HeadSpec(kind=HeadKind.RAF_DB_7)
    affect = HeadSpec(kind=HeadKind.AFFECTNET_8_VA)
    va_only = HeadSpec(kind=HeadKind.VA_ONLY_2)
    return [
        ("mse", va_only, lambda o, t: mse_loss(o, t[1])),
        ("ce", raf, lambda o, t: softmax_cross_entropy(o, t[0] % n_classes)),
        (
            "weighted_ce",
            raf,
            lambda o, t: weighted_cross_entropy(o, t[0] % n_classes, weights),
        ),
        ("combined_affectnet", affect, combined),
        ("stage1", affect, stage1),
        ("stage2", va_only, lambda o, t: stage2_va_loss(o, t[1], cfg.va_loss)),
    ]


def _smooth_batch(
    model: Model,
    rng: RngState,
    n_rows: int,
    margin: float,
    attempts: int = 20,
) -> np.ndarray:
    """抽取所有 Leaky ReLU 输入都远离 0 的 batch，最多尝试 attempts 次"""
    best, best_margin = None, -1.0
    for _ in range(attempts):
        batch = rng.normal(size=(n_rows, model.input_dim))
        found = model.kink_margin(batch)
        if found >= margin:
            return batch
        if found > best_margin:
            best, best_margin = batch, found
    logger.warning(
        f"No batch cleared the kink margin {margin:.1e}, using {best_margin:.1e}",
    )
    return best  # type: ignore[return-value]


@command(
    "gradcheck",
    help="compare analytic and numeric gradients",
    required=("out",),
)
def gradcheck(cfg: RunConfig) -> Artifacts:
    data_rng, weight_rng, model_rng = RngState(cfg.seed).split(3)
    n = cfg.gradcheck_rows
    labels = np.arange(n) % 8
    va = data_rng.uniform(-0.9, 0.9, size=(n, 2))
    errors: Dict[str, float] = {}
    for name, head, loss_fn in _gradcheck_cases(cfg, weight_rng):
        model = build_classifier(
            cfg.gradcheck_input_dim,
            head,
            model_rng,
            hidden_width=cfg.gradcheck_hidden,
            dropout=(0.0, 0.0),
        )
        h = cfg.gradcheck_h
        batch = _smooth_batch(model, data_rng, n, 10 * h)
        errors[name] = grad_check(model, loss_fn, batch, (labels, va), h)
        logger.info(f"{name}: max relative error {errors[name]:.3e}")
    frame = pd.DataFrame(
        [[name, error] for name, error in errors.items()],
        columns=["loss", "max_error"],
    )
    tolerance = cfg.gradcheck_tolerance
    failed = [name for name, error in errors.items() if error >= tolerance]
    metrics = {"errors": errors, "tolerance": tolerance, "passed": not failed}
    _write_json(run_directory(cfg) / "metrics.json", metrics)
    if failed:
        raise NumericalError(
            f"gradient check failed for {', '.join(failed)}",
            errors={name: errors[name] for name in failed},
        )
    return {
        "metrics": metrics,
        "report": frame.to_string(index=False, float_format=lambda v: f"{v:.3e}")
        + "\n",
    }


@command("synth", help="generate synthetic parameter datasets", required=("out",))
def synth(cfg: RunConfig) -> Artifacts:
    out = run_directory(cfg)
    n_train = cfg.synth.n_samples
    total = n_train + cfg.n_val + cfg.n_test
    spec = cfg.synth.copy(update={"n_samples": total})
    ds = synth_generate(spec, RngState(cfg.seed).split(2)[0])
    written = {}
    rest = ds
    for name, size in (("train", n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        if size == 0:
            continue
        if size < len(rest):
            part, rest = split_dataset(rest, size)
        else:
            part = rest
        save_param_dataset(part, out / f"{name}.csv")
        written[name] = {
            "n": len(part),
            "class_counts": class_frequencies(part).tolist(),
        }
    if cfg.toy_asset is not None:
        n_vertices, n_shape, n_expr = cfg.toy_asset
        asset_rng = RngState(cfg.seed).split(2)[1]
        asset = make_toy_asset(n_vertices, n_shape, n_expr, asset_rng)
        save_asset(asset, out / "asset.bin")
        written["asset"] = {
            "n_vertices": n_vertices,
            "n_shape": n_shape,
            "n_expr": n_expr,
        }
    lines = [f"{name}: {info}" for name, info in written.items()]
    return {"metrics": written, "report": "\n".join(lines) + "\n"}


@command(
    "decode-mesh",
    help="decode shape/expression coefficients into an OBJ mesh",
    required=("asset", "params", "out"),
)
def decode_mesh_command(cfg: RunConfig) -> Artifacts:
    asset = load_asset(cfg.asset)  # type: ignore[arg-type]
    shape, expr = load_param_rows(cfg.params)  # type: ignore[arg-type]
    mesh = decode_mesh(asset, shape, expr)
    export_obj(mesh, cfg.out)  # type: ignore[arg-type]
    metrics = {
        "n_vertices": int(mesh.vertices.shape[0]),
        "n_triangles": int(mesh.triangles.shape[0]),
        "n_shape_params": int(shape.size),
        "n_expr_params": int(expr.size),
        "bbox_min": mesh.vertices.min(axis=0).tolist(),
        "bbox_max": mesh.vertices.max(axis=0).tolist(),
    }
    return {"metrics": metrics, "report": f"wrote {cfg.out}: {metrics}\n"}
