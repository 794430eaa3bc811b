"""Memory-augmented two-stage talking-face pipeline on synthetic data.

Stage one predicts expression coefficients from audio features through an
encoder-decoder with a trainable key-value memory between the two halves.
Stage two renders frames from the projected mouth geometry and a masked
template, retrieving per-identity mouth patches from an explicit memory
built by greedy max-min selection.
"""

from .a2e import (
    A2EModel,
    AudioFeatureSequence,
    ExpressionSequence,
    a2e_loss,
    adapt_a2e,
    predict_expressions,
    train_a2e,
)
from .attention import (
    AttentionParams,
    ImplicitMemoryBank,
    attend,
    pairwise_cosine_corr,
    similarity,
)
from .config import RunConfig
from .explicit_memory import (
    ExplicitMemoryBank,
    VertexPatchPair,
    build_explicit_memory,
    closest_pair,
    load_bank,
    rebuild_for_identity,
    rms_distance,
    save_bank,
    stability_check,
)
from .face_model import (
    BlendshapeBasis,
    CameraSpec,
    FaceCoefficients,
    MouthVertexSet,
    extract_mouth_vertices,
    make_synthetic_basis,
    project_to_guide_image,
    reconstruct_vertices,
)
from .renderer import (
    Discriminator,
    FixedFeatureExtractor,
    RendererModel,
    RenderInput,
    adapt_renderer,
    discriminator_loss,
    fixed_feature_distance,
    render,
    renderer_generator_loss,
    train_renderer,
)
from .estimators import ExpressionRegressor, NeuralRendererEstimator
from .evaluation import (
    AblationPlan,
    image_metrics,
    run_ablation,
    toy_randomize_implicit_memory,
    toy_swap_explicit_memory,
    vertex_rmse,
)
from .synth_data import (
    IdentitySpec,
    SampleRecord,
    generate_identity,
    generate_sequence,
    read_dataset,
    write_dataset,
)

__version__ = "0.1.0"
