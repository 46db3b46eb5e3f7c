import datetime
import os

from tqdm import tqdm

DEBUG_MODE = os.getenv("SEQAUG_DEBUG", "0") == "1"


def set_debug(enabled):
    global DEBUG_MODE
    DEBUG_MODE = bool(enabled)


def log(msg, level="INFO"):
    """Smart logger that filters based on mode"""
    if level == "DEBUG" and not DEBUG_MODE:
        return
    timestamp = datetime.datetime.now().strftime("%H:%M:%S")
    # tqdm.write keeps progress bars intact
    tqdm.write(f"[{timestamp}] [{level}] {msg}")


def banner(title):
    tqdm.write("=" * 80)
    tqdm.write(title)
    tqdm.write("=" * 80)
