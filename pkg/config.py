import os

from dotenv import load_dotenv

load_dotenv()

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))


def _default_path(*parts: str) -> str:
    return os.path.join(ROOT_DIR, *parts)


class BaseConfig:
    HMSIM_ENV = os.getenv("HMSIM_ENV", "production")
    PORT = int(os.getenv("PORT", "5001"))
    LOG_LEVEL = os.getenv("HMSIM_LOG_LEVEL", "INFO")

    # Simulator assets
    CALIBRATION_PATH = os.getenv("HMSIM_CALIBRATION", _default_path("data", "calibration.yaml"))
    PROFILES_PATH = os.getenv("HMSIM_PROFILES", _default_path("data", "npb_profiles.yaml"))
    EXPERIMENTS_DIR = os.getenv("HMSIM_EXPERIMENTS", _default_path("experiments"))
    OUTPUT_DIR = os.getenv("HMSIM_OUTPUT_DIR", "results")
    WORKERS = int(os.getenv("HMSIM_WORKERS", "1"))

    # Results store
    DATABASE_URL = os.getenv("HMSIM_DATABASE_URL", f"sqlite:///{_default_path('hmsim_results.db')}")
    if DATABASE_URL.startswith("postgres://"):
        DATABASE_URL = DATABASE_URL.replace("postgres://", "postgresql://", 1)

    SQLALCHEMY_ENGINE_OPTIONS = {
        "pool_pre_ping": True,
    }


class DevelopmentConfig(BaseConfig):
    HMSIM_ENV = "development"
    DEBUG = True
    LOG_LEVEL = os.getenv("HMSIM_LOG_LEVEL", "DEBUG")


class ProductionConfig(BaseConfig):
    HMSIM_ENV = "production"
    DEBUG = False


class TestingConfig(BaseConfig):
    HMSIM_ENV = "testing"
    DEBUG = False
    TESTING = True
    DATABASE_URL = "sqlite:///:memory:"


# Choose config based on environment
config = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
    "default": ProductionConfig,
}


def get_config(name: str = None):
    """Resolve a config class by name, falling back to HMSIM_ENV then the default."""
    name = name or os.getenv("HMSIM_ENV", "default")
    return config.get(name, config["default"])
