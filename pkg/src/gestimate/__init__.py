"""G-estimation of structural nested models for point and sequential treatments.

Estimators follow the fit/attributes convention: construct with the model
specification, call ``fit(panel)``, read ``psi_``, ``cov_`` and ``result_``.
"""

from .blip import (BlipSpec, BlipTerm, SaftmSpec, SaftmTerm, SndmSpec,
                   blip_jacobian, blipdown_sndm, blipdown_snmm, eval_blip,
                   transform_point)
from .compare import (IpwMsmEstimator, OlsEstimator, PsRegressionEstimator,
                      VarianceReport, analytic_variances, pooling_check)
from .effects import CdeEstimator, CdeSpec, CdeTerm, RegimeMeanPredictor, RegimeSpec
from .gest import (ConfidenceSet, EstimateResult, GridSpec, IvGEstimator,
                   LogisticSmmEstimator, SdmGridEstimator, SensitivitySpec,
                   SensitivitySweep, SmmGEstimator, SnmmGEstimator)
from .nuisance import (OutcomeFit, OutcomeMeanModel, PropensityFit,
                       fit_outcome_working, fit_propensity, known_propensity,
                       tilted_propensity)
from .panel import (HistoryView, Panel, PanelSchema, SubjectRecord,
                    history_view, load_panel, summarize_overlap, write_panel)
from .sim import (MCSummary, SCENARIOS, get_scenario, monte_carlo,
                  oracle_regime_mean)
from .survival import (SaftmGridEstimator, SurvTransform, blipdown_time,
                       censor_bound, smooth_weight, surv_transform)

__version__ = "0.1.0"

__all__ = [
    "BlipSpec", "BlipTerm", "SndmSpec", "SaftmSpec", "SaftmTerm",
    "eval_blip", "transform_point", "blipdown_snmm", "blipdown_sndm",
    "blip_jacobian",
    "Panel", "PanelSchema", "SubjectRecord", "HistoryView",
    "load_panel", "write_panel", "history_view", "summarize_overlap",
    "PropensityFit", "OutcomeFit", "OutcomeMeanModel",
    "fit_propensity", "known_propensity", "fit_outcome_working",
    "tilted_propensity",
    "EstimateResult", "ConfidenceSet", "GridSpec", "SensitivitySpec",
    "SmmGEstimator", "SnmmGEstimator", "IvGEstimator", "LogisticSmmEstimator",
    "SensitivitySweep", "SdmGridEstimator",
    "SaftmGridEstimator", "SurvTransform", "smooth_weight",
    "blipdown_time", "censor_bound", "surv_transform",
    "IpwMsmEstimator", "OlsEstimator", "PsRegressionEstimator",
    "VarianceReport", "analytic_variances", "pooling_check",
    "RegimeSpec", "RegimeMeanPredictor", "CdeSpec", "CdeTerm", "CdeEstimator",
    "MCSummary", "SCENARIOS", "get_scenario", "monte_carlo",
    "oracle_regime_mean",
    "__version__",
]
