"""Two-party vertical federated learning arena: joint-model training (VLR,
VHNN, VSNN), label/feature privacy attacks, protection mechanisms, and
privacy-utility trade-off scoring."""

from .datasets import (AUX_SIZE_GRID, AuxiliarySample, DatasetSpec,
                       VerticalDataset, draw_auxiliary, generate_image_patterns,
                       generate_synthetic, load_csv)
from .engine import (ALGORITHMS, CutLayerBatch, Parties, PartyState,
                     TrainConfig, VulnerabilityLog, evaluate_utility,
                     inference_forward, train_joint)
from .evaluation import (SETTINGS, EvaluationTask, StrengthPoint,
                         TradeoffRecord, accuracy, aggregate_records, auc,
                         optimal_pu_score, privacy_leakage, pu_score,
                         run_tasks, ssim, utility_loss, validate_task)
from .numerics import RngStream, Tape, cross_entropy, forward_fc, matmul
from .protections import (PROTECTION_KINDS, STRENGTH_GRIDS, MarvellSolution,
                          PrecodeBottleneck, ProtectionBinding, dp_laplace,
                          discrete_sgd, gradient_compress, iso, marvell_apply,
                          marvell_solve, max_norm, mixup_batch,
                          precode_bottleneck, protect_cut_gradient)
from .attacks import (CompletionResult, LabelScoreSet, Reconstruction,
                      direct_label_inference, direction_scoring,
                      gradient_inversion, known_model_inversion,
                      model_completion, model_inversion, norm_scoring,
                      residue_reconstruct)

__version__ = "0.1.0"
