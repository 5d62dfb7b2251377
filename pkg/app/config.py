import os

SCHEMA_VERSION = 1

# Toy model defaults
DEFAULT_LAYERS = 4
DEFAULT_HEADS = 4
DEFAULT_WIDTH = 64
DEFAULT_VOCAB = 64
DEFAULT_IMAGE_SIDE = 32
DEFAULT_PATCH_SIZE = 8
DEFAULT_MAX_SEQ_LEN = 48
DEFAULT_MAX_ANSWER_LEN = 20
LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02
MLP_RATIO = 4

# Reserved vocabulary slots
PAD_TOKEN_ID = 0
BOS_TOKEN_ID = 1
EOS_TOKEN_ID = 2

# Optimizer (adaptive moments)
ADAM_LR = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Evaluation
PERTURBATION_PERCENTAGES = (0, 10, 20, 30, 40, 50, 60, 70, 80, 90)
IOU_THRESHOLDS = 20
SNR_EPSILON = 1e-12
LOG_PROB_FLOOR = -745.0
INSERTION_SIGMA_AT_224 = 50.0
HEAD_TOPK_FRACTIONS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# Synthetic scenes
BACKGROUND_RGB = (128, 128, 128)
PLACEMENT_RETRIES = 100
MAX_REJECTED_SEEDS = 1000  # consecutive rejections before a dataset spec is declared infeasible
EVAL_SEED_OFFSET = 1_000_003

# Runtime
OUTPUT_DIR = "runs/default"
OUTPUT_DIR_ENV = "DEXAR_OUT_DIR"
LOG_LEVEL = os.environ.get("DEXAR_LOG_LEVEL", "INFO")
TENSOR_DEBUG = os.environ.get("TENSORCORE_DEBUG", "0") == "1"

KNOWN_METHODS = ("dexar", "raw_attention", "rollout", "gradcam", "chefercam", "attn_x_grad")
KNOWN_METRICS = (
    "auc_pos", "auc_neg", "auc_insertion", "auc_deletion", "pic_auc",
    "iou", "soft_iou", "epg", "snr_db", "mse", "filler_snr",
)
