"""Reference dynamic-discrete-choice models for the solver benchmarks."""

from .bus import BusEngineModel
from .entry_exit import EntryExitModel, KroneckerPolicyOperator
from .storable import (StorableGoodsModel, StorableValuationOperator,
                       build_desk_storable, conditional_logit_share,
                       desk_storable_from_params, inclusive_value,
                       storable_flow_utility)

__all__ = [
    "BusEngineModel",
    "EntryExitModel",
    "KroneckerPolicyOperator",
    "StorableGoodsModel",
    "StorableValuationOperator",
    "build_desk_storable",
    "conditional_logit_share",
    "desk_storable_from_params",
    "inclusive_value",
    "storable_flow_utility",
]
