"""dragdiff: drag-guided denoising-diffusion sampling against exact mixture
denoisers, with a differentiable random-feature drag surrogate and a
deterministic experiment harness."""

from .schedule import GuidanceWeights, NoiseSchedule, alpha, eta, gamma_t, make_schedule
from .denoisers import (
    MixtureDenoiser,
    cfg_combine,
    denoised_estimate,
    empirical_denoiser,
    load_mixture,
    mc_training_loss,
    predict_epsilon,
    predict_epsilon_batch,
)
from .samplers import (
    QuadraticTarget,
    SamplerConfig,
    Trajectory,
    ddim_sample_batch,
    ddim_step,
    ge_combine,
    guided_step,
    img2img_init,
    naive_pixel_descent,
    pgd_step,
    run_sampler,
)
from .surrogate import (
    PrecomputedFeatureTable,
    RandomConvExtractor,
    SurrogateModel,
    evaluate,
    extract_features,
    fit_from_precomputed,
    fit_ridge,
    grad_drag,
    init_random_features,
    load_model,
    predict_drag,
    save_model,
)
from .data import (
    DatasetRecord,
    SynthVehicleParams,
    augment,
    load_dataset,
    oracle_cd,
    render_vehicle,
    save_dataset,
    split_by_id_hash,
    synth_vehicle_dataset,
)

__version__ = "0.1.0"
