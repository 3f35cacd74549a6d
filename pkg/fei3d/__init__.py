from .data import (
    align as align,
    class_frequencies as class_frequencies,
    load_features as load_features,
    load_param_dataset as load_param_dataset,
    load_predictions as load_predictions,
    ParamDataset as ParamDataset,
    PredictionSet as PredictionSet,
    save_param_dataset as save_param_dataset,
    save_predictions as save_predictions,
    synth_generate as synth_generate,
)
from .exception import Fei3dError as Fei3dError
from .fusion import (
    fuse_predictions as fuse_predictions,
    intermediate_forward as intermediate_forward,
    IntermediateFusionModel as IntermediateFusionModel,
    late_fuse_class as late_fuse_class,
    late_fuse_va as late_fuse_va,
    sweep_fusion_weight as sweep_fusion_weight,
)
from .log import configure_logging as configure_logging, logger as logger
from .metrics import (
    classification_report as classification_report,
    confusion as confusion,
    format_table as format_table,
    regression_report as regression_report,
)
from .models import *
from .morphviz import (
    decode_mesh as decode_mesh,
    export_obj as export_obj,
    load_asset as load_asset,
)
from .nn import (
    build_classifier as build_classifier,
    grad_check as grad_check,
    MlpModel as MlpModel,
)
from .numerics import RngState as RngState
from .training import (
    fit as fit,
    fit_two_stage_va as fit_two_stage_va,
    load_checkpoint as load_checkpoint,
    save_checkpoint as save_checkpoint,
)
