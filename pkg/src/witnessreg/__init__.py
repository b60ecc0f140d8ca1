"""Rigid alignment and registration of point clouds from small witness sets."""

from .cost import CostSpec, Huber, Power, SumAll, SumSmallest, Threshold, eval_cost, eval_matched_cost
from .data import InstanceSpec, generate_instance, load_cloud, save_cloud
from .geom import Alignment, DegenerateInputError, DimensionError, apply_alignment
from .prob import prob_alignment, prob_rot
from .registration import Matching, RegistrationResult, align_and_match, icp, kabsch_ssd, p_icp_refined
from .witness import CandidateSet, approx_align, approx_alignment_exhaustive, approx_alignment_sampled, get_rot

__all__ = [
    "Alignment", "CandidateSet", "CostSpec", "DegenerateInputError", "DimensionError", "Huber",
    "InstanceSpec", "Matching", "Power", "RegistrationResult", "SumAll", "SumSmallest",
    "Threshold", "align_and_match", "apply_alignment", "approx_align",
    "approx_alignment_exhaustive", "approx_alignment_sampled", "eval_cost", "eval_matched_cost",
    "generate_instance", "get_rot", "icp", "kabsch_ssd", "load_cloud", "p_icp_refined",
    "prob_alignment", "prob_rot", "save_cloud",
]
