"""Bi-polar, class-discriminative relevance attribution for CNNs.

The package decomposes a network's class logits into signed pixel-level
relevance: evidence for the target class stays positive, evidence for
competing ("hostile") classes is driven negative, and the total relevance is
conserved through every backward step.  It ships its own conv/linear/pool
kernels, a portable weight-archive format, localization evaluation
(pointing game, box mIoU), a weight-randomization sanity check, and seismic
heatmap rendering.
"""

from .model import (ActivationTrace, LayerSpec, ModelDescriptor, ModelError,
                    fold_batchnorm, forward_trace, load_descriptor,
                    output_gradients, randomize_cascading, save_descriptor)
from .propagate import (LayerRelevance, PropagationConfig, PropagationError,
                        RspResult, run_rsp)
from .relmap import (ClassSpec, SectionedRelevanceMap, contrastive_relative_map,
                     grad_activation_map, gradcam_heatmap, gradient_saliency,
                     normalize_sections, purge, relative_map)
from .tensor import ConvGeometry, ShapeError
from .weights_io import (ArchiveError, ValidationReport, read_archive,
                         read_archive_file, validate_against_descriptor,
                         write_archive, write_archive_file)

__version__ = "0.1.0"
