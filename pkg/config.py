import os
import logging
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Logging level for library modules (DEBUG, INFO, WARNING, ...)
SEQTM_LOG_LEVEL = os.getenv("SEQTM_LOG_LEVEL", "INFO").upper()
logging.basicConfig(
    level=getattr(logging, SEQTM_LOG_LEVEL, logging.INFO),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)

# Where run artifacts (observations, registries, logs) are written by default
SEQTM_OUTPUT_DIR = os.getenv("SEQTM_OUTPUT_DIR", "./runs")

# Default worker count for parallel surrogate training and joint sampling
SEQTM_WORKERS = int(os.getenv("SEQTM_WORKERS", "1"))

# External black-box models get this many seconds per batch
SEQTM_BLACKBOX_TIMEOUT = float(os.getenv("SEQTM_BLACKBOX_TIMEOUT", "600"))

# File format version tags (bump when a layout changes)
MAP_FORMAT_VERSION = 1
SAMPLES_FORMAT_VERSION = 1
REGISTRY_FORMAT_VERSION = 1
LOG_FORMAT_VERSION = 1
BLACKBOX_PROTOCOL_VERSION = "seqtm-blackbox/1"

# Run configuration file name dumped into every output directory
RUN_CONFIG_FILE = "config.json"
