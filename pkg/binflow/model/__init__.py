from .base import Dropout, LayerNorm, Linear, Module
from .bundle import EncodedBlock, ModelBundle, pad_batch
from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint
from .flows import FlowStack, flow_forward, flow_inverse, nll_loss, transform_latent
