import os
from pathlib import Path

import structlog
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.geoblend.errors import ConfigError

load_dotenv()
logger = structlog.get_logger(__name__)


class RuntimeSettings(BaseModel):
    """
    Process-wide defaults read from the environment (or a .env file).

    Attributes:
        threads: Default number of joblib workers (GEOBLEND_THREADS).
        output_dir: Default output directory (GEOBLEND_OUTPUT_DIR).

    The factorization backend (GEOBLEND_FACTORIZATION) is read by factorize itself.
    """

    threads: int = Field(1, ge=1)
    output_dir: Path = Path("runs")

    model_config = ConfigDict(frozen=True)

    @classmethod
    def from_env(cls) -> "RuntimeSettings":
        """
        Build the settings from environment variables, falling back to the defaults.
        """
        values: dict[str, object] = {}
        if threads := os.getenv("GEOBLEND_THREADS"):
            try:
                values["threads"] = int(threads)
            except ValueError as exc:
                raise ConfigError(
                    f"GEOBLEND_THREADS must be an integer, got {threads!r}"
                ) from exc
        if output_dir := os.getenv("GEOBLEND_OUTPUT_DIR"):
            values["output_dir"] = Path(output_dir)

        try:
            settings = cls.model_validate(values)
        except ValidationError as exc:
            raise ConfigError(f"Invalid runtime settings: {exc}") from exc
        logger.debug("Loaded runtime settings", **settings.model_dump(mode="json"))
        return settings
