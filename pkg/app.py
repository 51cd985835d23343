import logging

from flask import Flask

import models
from config import get_config
from routes import bp as api_bp

logger = logging.getLogger(__name__)


def create_app(config_name: str = None):
    app = Flask(__name__)

    # Load configuration based on environment
    cfg = get_config(config_name)
    app.config.from_object(cfg)

    models.configure(cfg.DATABASE_URL)
    models.create_tables()

    # Register blueprints
    app.register_blueprint(api_bp)
    logger.info("results API ready (%s)", cfg.HMSIM_ENV)
    return app


if __name__ == "__main__":
    app = create_app()
    app.run(
        host="0.0.0.0",
        port=app.config.get("PORT", 5001),
        debug=app.config.get("DEBUG", False),
    )
