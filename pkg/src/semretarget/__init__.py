"""Skeleton-aware motion retargeting with semantic and geometric fine-tuning."""
from .character import Character, make_synthetic_character, make_synthetic_motion
from .errors import *  # noqa: F401,F403
from .losses import (LossWeights, PenRamp, adv_loss_discriminator, adv_loss_generator,
                     cyc_loss, jdm_loss, pen_loss, rec_loss, sem_loss, total_finetune_loss,
                     total_pretrain_loss)
from .metrics import EvalReport, evaluate, fid_metric, mse_metric, pen_metric, scl_metric
from .network import Discriminator, GraphConvLayer, RetargetModel, SkeletonGraph, graph_conv
from .render import Camera, RenderedFrame, default_cameras, render_views
from .sdf import SignedDistanceGrid, build_sdf, query_sdf
from .semantics import (MockEmbedder, PromptTemplate, SemanticEmbedding, VLMClient, VLMEmbedder,
                        guided_vqa, itm_score, mock_embed, vlm_embed)
from .skeleton import (Motion, Skeleton, forward_kinematics, joint_distance_matrix,
                       matrix_to_rot6d, normalize_jdm, rot6d_to_matrix)
from .skinning import (BodyPartition, SkinnedMesh, linear_blend_skinning, partition_limbs,
                       skin_motion)
from .training import (TrainConfig, TrainResult, direct_optimize, finetune, pretrain,
                       retarget)

__version__ = "0.1.0"
