"""Bidirectional and multi-model knowledge transfer on a small numpy autodiff core."""
from .autodiff import Tape, Tensor, backward, grad_check, stop_gradient, tensor
from .data import DatasetHandle, ViewPolicy, complementary_views, generate
from .models import ArchDescriptor, ModelBundle, init_model, load_checkpoint, save_checkpoint
from .partition import PartitionMask, confidence_masks, loss_masks, multi_masks
from .trainer import TransferConfig, TransferReport, pretrain, run_transfer

__version__ = "0.1.0"
