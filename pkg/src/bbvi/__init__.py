"""Black-box variational inference with score-function gradients."""
from .families import (
    FactorKind,
    GammaMeanVar,
    GammaShapeRate,
    GaussianMeanLogStd,
    InvalidParameterError,
    MeanFieldFamily,
    SupportError,
    gammae_to_shape_rate,
)
from .model import FactorPlate, Latent, ModelError, ModelSpec, factor
from .estimators import (
    GradientEstimate,
    SampleBatch,
    SupportMismatchError,
    cv_scale,
    draw_batch,
    estimator_variance,
    naive_gradient,
    rb_cv_gradient,
    rb_gradient,
    subsampled_gradient,
)
from .optimize import (
    AdaGradState,
    DivergedRunError,
    RobbinsMonroSchedule,
    RunConfig,
    RunTrace,
    adagrad_step,
    elbo_estimate,
    rm_step,
    run_bbvi,
)
from .baseline import ChainConfig, ProposalConfig, mh_step, run_chain

__version__ = "0.1.0"
