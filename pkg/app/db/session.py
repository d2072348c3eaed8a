from sqlalchemy import create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import declarative_base, sessionmaker
from app.core.config import settings
from app.core.errors import RegistryError
from app.core.logger import logger

engine = create_engine(settings.DATABASE_URL)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
Base = declarative_base()

def make_session_factory(url: str):
    """Session factory bound to another database (tests use in-memory sqlite)."""
    other = create_engine(url)
    init_db(other)
    return sessionmaker(autocommit=False, autoflush=False, bind=other)

def init_db(bind=None):
    """Initialize database tables."""
    from app.models.run_record import ExperimentRun, MetricRecord  # Ensure models are registered
    target = bind or engine
    try:
        Base.metadata.create_all(bind=target)
    except SQLAlchemyError as e:
        logger.error(f"Error initializing the run registry at {target.url}: {e}")
        raise RegistryError(f"run registry unavailable at {target.url}: {e}") from e
