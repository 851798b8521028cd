"""Discrete-diffusion layout generation: tokenized layouts, mask-and-replace
corruption, a denoising transformer, constrained sampling, and metrics."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .constraints import (LOSS_GUIDED, REFINE_DEFAULT, REFINE_GAUSSIAN,
                          REFINE_NEGATION, PriorSpec, RelationConstraint,
                          expected_box, refine_prior, relation_loss)
from .core import (COMPLETION, CATEGORY_SIZE_TO_POSITION, CATEGORY_TO_GEOMETRY,
                   DEFAULT_MAX_ELEMENTS, REFINEMENT, RELATIONSHIP, TASKS,
                   UNCONDITIONAL, Element, Layout, TaskCondition, canonical_order,
                   flatten, make_condition, partial_condition, unconditional,
                   unflatten, validate)
from .data import (Corpus, SyntheticSpec, gen_synthetic, load_corpus,
                   load_layouts_jsonl, perturb_for_refinement, save_corpus,
                   save_layouts_jsonl)
from .denoiser import Denoiser, DenoiserConfig, desk_config, paper_config
from .diffusion import (DiffusionSchedule, build_schedule, corrupt,
                        cumulative_matrix, fast_reverse_distribution, posterior,
                        reverse_distribution, schedule_for_vocab,
                        training_loss, transition_matrix)
from .errors import DataError, LayoutGenError, NumericError
from .metrics import (DenoiserFeatureExtractor, MetricReport, alignment,
                      category_histogram, density_coverage, docsim, evaluate,
                      fid, fid_from_features, max_iou_collection, max_iou_pair,
                      overlap, violation_rate)
from .sampler import adjust_logits, guided_sample, sample, sample_tokens
from .train import TrainConfig, TrainResult, train
from .vocab import (GEOMETRIC, KMEANS, MODALITIES, PERCENTILE, UNIFORM,
                    Vocabulary, fit_quantizer, fit_vocabulary)

__version__ = "0.1.0"
