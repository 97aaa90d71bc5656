"""malfuse: tri-modal malware visualization, fused CNN classification,
and Grad-CAM explanation at desk scale."""

__version__ = "0.1.0"

from .corpus import (
    ByteStream,
    CorpusIndex,
    OpcodeSequence,
    SplitPlan,
    load_manifest,
    parse_asm_opcodes,
    parse_bytes_file,
    split_corpus,
)
from .imaging import (
    BitMatrix,
    EntropySeries,
    Modality,
    ModalImage,
    bigram_grayscale,
    bilinear_resize,
    bit_matrix_to_image,
    entropy_series,
    render_entropy_graph,
    shannon_entropy,
    simhash_bit_matrix,
)
from .model import (
    BranchConfig,
    ModelConfig,
    TrainConfig,
    TrainedModel,
    build_model,
    predict,
    train,
)
from .nnet import FuseOp, FusionSpec, Tensor, fuse, grad_check

__all__ = [
    "BitMatrix",
    "BranchConfig",
    "ByteStream",
    "CorpusIndex",
    "EntropySeries",
    "FuseOp",
    "FusionSpec",
    "Modality",
    "ModalImage",
    "ModelConfig",
    "OpcodeSequence",
    "SplitPlan",
    "Tensor",
    "TrainConfig",
    "TrainedModel",
    "bigram_grayscale",
    "bilinear_resize",
    "bit_matrix_to_image",
    "build_model",
    "entropy_series",
    "fuse",
    "grad_check",
    "load_manifest",
    "parse_asm_opcodes",
    "parse_bytes_file",
    "predict",
    "render_entropy_graph",
    "shannon_entropy",
    "simhash_bit_matrix",
    "split_corpus",
    "train",
]
