"""focuskit: defocus-camera simulation, learned autofocus control, and
all-in-focus capture strategies."""

from .defocus import (
    BlurKernel,
    CalibrationConfig,
    CalibrationError,
    DefocusModel,
    GammaCurve,
    calibrate_model,
    calibrate_pair,
    gamma_forward,
    gamma_inverse,
    imscale,
    make_disk_kernel,
    make_gaussian_kernel,
    make_synthetic_model,
    synthesize_defocus,
)
from .scene import (
    Camera,
    Frame,
    Scene,
    SceneConfigError,
    advance,
    capture,
    make_texture,
    oracle_steps,
    scene_from_config,
)
from .nets import (
    LayerSpec,
    NetworkWeights,
    build_discriminator_spec,
    build_estimator_spec,
    forward,
    global_forward,
    load_weights,
    save_weights,
    to_global,
)
from .training import TrainingConfig, TrainingError, generate_training_set, train
from .autofocus import AfConfig, AfResult, count_time_steps, run_autofocus
from .baselines import RuleParams, fibonacci_search, rule_based_search, tenengrad
from .allinfocus import (
    ActivationMatrix,
    DeviationMatrix,
    InFocusMask,
    StrategyConfig,
    in_focus_mask,
    next_focus,
    resolve_signs,
    run_dynamic,
    run_static,
    should_terminate_static,
    update_activation_dynamic,
    update_activation_static,
)
from .fusion import FocusStack, align, fuse

__version__ = "0.1.0"
