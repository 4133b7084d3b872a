"""Numpy implementation of a spatial and channel attention block (MSA, SRGA,
CSA) for change detection, with a small autograd engine, metrics, synthetic
data and a command-line harness."""
__version__ = "0.1.0"

from .block import (COMPONENT_VARIANTS, ORDER_VARIANTS, SscpConfig, SscpParams, build_variant,
                    component_costs, count_params_flops, init_sscp, parse_variant, sscp_forward)
from .csa import CsaParams, csa_apply, csa_forward
from .gradcheck import grad_check, grad_check_report
from .metrics import ConfusionCounts, MetricReport, confusion_from_masks, metric_report, welch_t_test
from .msa import MsaParams, msa_forward
from .params import ParamStore
from .srga import SrgaParams, srga_forward
from .tensor import ConfigError, ShapeError, Tensor, no_grad

__all__ = [
    "COMPONENT_VARIANTS", "ORDER_VARIANTS", "ConfigError", "ConfusionCounts", "CsaParams",
    "MetricReport", "MsaParams", "ParamStore", "ShapeError", "SrgaParams", "SscpConfig",
    "SscpParams", "Tensor", "build_variant", "component_costs", "confusion_from_masks",
    "count_params_flops", "csa_apply", "csa_forward", "grad_check", "grad_check_report",
    "init_sscp", "metric_report", "msa_forward", "no_grad", "parse_variant", "srga_forward",
    "sscp_forward", "welch_t_test",
]
