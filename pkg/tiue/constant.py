from pathlib import Path

NANOID_LENGTH = 12

PROJECT_ROOT = Path(__file__).resolve().parent.parent
LOG_DIR = PROJECT_ROOT / 'logs'
CONFIG_LOC = PROJECT_ROOT / 'config.yml'
INTERMEDIATE_DATA_LOC = PROJECT_ROOT / 'intermediates'

# Checkpoint container
CHECKPOINT_MAGIC = b"TIUE"
CHECKPOINT_VERSION = 1
CHECKPOINT_PREAMBLE_BYTES = 16  # magic(4) + version u32(4) + header length u64(8)

# Tensor namespaces inside a checkpoint
RAW_PREFIX = "raw."
LORA_PREFIX = "lora."

# Schedule index meaning "fully denoised target" (uses alpha_bar_final)
TERMINAL_INDEX = -1

# Floor applied to empirical variances before taking a log
VARIANCE_FLOOR = 1e-12

# Seed of the fixed condition embedding table
COND_TABLE_SEED = 20_240_917

THREADS_ENV = "TIUE_THREADS"
MULTI_THREAD_COUNT = 4

PPM_MAXVAL = 255
