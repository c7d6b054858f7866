from os import environ

from pydantic import BaseSettings
from pydantic import validator

LOG_LEVELS = ("error", "info", "debug")


class Settings(BaseSettings):
    STRUCTNODE_LOG: str = "info"

    def __init__(self):
        super(Settings, self).__init__()

    @validator("STRUCTNODE_LOG")
    def validate_log_level(cls, level: str):
        level = level.lower()
        if level not in LOG_LEVELS:
            raise ValueError(f"STRUCTNODE_LOG must be one of {', '.join(LOG_LEVELS)}")
        return level

    class Config:
        env_file = environ.get("ENV", ".env")
        case_sensitive = True


settings = Settings()
