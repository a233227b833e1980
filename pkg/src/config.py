import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Environment configuration for the layered convection simulator"""

    # Worker threads for per-wavenumber work (0 = one per CPU)
    THREADS = int(os.environ.get('LAYERCON_THREADS', '0'))

    # Logging Configuration
    LOG_LEVEL = os.environ.get('LAYERCON_LOG_LEVEL', 'INFO')
    LOG_FILE = os.environ.get('LAYERCON_LOG_FILE', 'layercon.log')
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    # Default output directory when the run file does not name one
    OUTPUT_DIR = os.environ.get('LAYERCON_OUTPUT_DIR', 'output')

    # Checkpoint format version written into every header
    CHECKPOINT_VERSION = 1

    @classmethod
    def validate(cls):
        """Validate configuration"""
        errors = []

        if cls.THREADS < 0:
            errors.append("LAYERCON_THREADS must be >= 0")

        if cls.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            errors.append(f"LAYERCON_LOG_LEVEL '{cls.LOG_LEVEL}' is not a logging level")

        if not cls.OUTPUT_DIR:
            errors.append("LAYERCON_OUTPUT_DIR must not be empty")

        return errors

    @classmethod
    def resolved_threads(cls) -> int:
        """Worker count after resolving 0 to the CPU count"""
        if cls.THREADS > 0:
            return cls.THREADS
        return os.cpu_count() or 1
