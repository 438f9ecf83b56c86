import logging
import os
import uuid
from datetime import datetime, timezone
from typing import Any, Dict, List, Mapping, Optional, Sequence

from astrapy import DataAPIClient
from astrapy.authentication import UsernamePasswordTokenProvider
from astrapy.constants import Environment
from pymongo import MongoClient

from errors import ConfigurationError
from settings import results_db_type

logger = logging.getLogger(__name__)

EPISODES_COLLECTION = "episodes"
REPORTS_COLLECTION = "reports"


def _portable(value: Any) -> Any:
    """numpy scalars and tuples as plain JSON-like values"""
    if isinstance(value, Mapping):
        return {str(k): _portable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_portable(v) for v in value]
    if hasattr(value, 'item') and callable(value.item):
        return value.item()
    return value


class ResultsStore:
    """Evaluation results sink on MongoDB or DataStax HCD, or nowhere"""

    def __init__(self, db_type: Optional[str] = None):
        self.db_type = db_type.strip().lower() if db_type else results_db_type()
        self.client = None
        self.database = None
        self.episodes = None
        self.reports = None
        self._setup_connection()

    @property
    def enabled(self) -> bool:
        return self.db_type != 'none'

    def _setup_connection(self):
        """Setup database connection based on configuration"""
        if self.db_type == 'none':
            return
        if self.db_type == 'mongodb':
            self._setup_mongodb()
        elif self.db_type == 'hcd':
            self._setup_hcd()
        else:
            raise ConfigurationError(f"Unsupported results database type: {self.db_type}")

    def _setup_mongodb(self):
        uri = os.getenv('MONGODB_URI', 'mongodb://localhost:27017/')
        database_name = os.getenv('MONGODB_DATABASE', 'storm_restoration')
        logger.info(f"🔌 Connecting to MongoDB results store ({database_name})")

        self.client = MongoClient(uri)
        self.database = self.client[database_name]
        self.episodes = self.database[EPISODES_COLLECTION]
        self.reports = self.database[REPORTS_COLLECTION]

    def _setup_hcd(self):
        api_endpoint = os.getenv('HCD_API_ENDPOINT')
        username = os.getenv('HCD_USERNAME')
        password = os.getenv('HCD_PASSWORD')
        keyspace = os.getenv('HCD_KEYSPACE', 'default_keyspace')

        if not all([api_endpoint, username, password]):
            raise ConfigurationError("HCD configuration incomplete. Check HCD_API_ENDPOINT, HCD_USERNAME, and HCD_PASSWORD")
        logger.info(f"🔌 Connecting to DataStax HCD results store ({keyspace})")

        token = UsernamePasswordTokenProvider(username, password)
        self.client = DataAPIClient(environment=Environment.HCD)
        database = self.client.get_database(api_endpoint, token=token)

        try:
            database.get_database_admin().create_keyspace(keyspace)
        except Exception as e:
            logger.debug(f"Keyspace {keyspace} already exists or creation failed: {e}")

        self.database = database
        self.episodes = self._collection(database, EPISODES_COLLECTION, keyspace)
        self.reports = self._collection(database, REPORTS_COLLECTION, keyspace)

    @staticmethod
    def _collection(database, name: str, keyspace: str):
        try:
            return database.create_collection(name, keyspace=keyspace)
        except Exception:
            return database.get_collection(name, keyspace=keyspace)

    def _require(self) -> None:
        if not self.enabled:
            raise ConfigurationError("results store is disabled (RESULTS_DB_TYPE=none)")

    def insert_episode_rows(self, run_id: str, rows: Sequence[Mapping[str, Any]]) -> int:
        """Write per-episode rows; returns how many documents were stored"""
        self._require()
        documents = [
            {'_id': str(uuid.uuid4()), 'run_id': run_id, **_portable(dict(row))}
            for row in rows
        ]
        if not documents:
            return 0

        try:
            result = self.episodes.insert_many(documents)
            written = len(result.inserted_ids) if hasattr(result, 'inserted_ids') else len(documents)
            logger.info(f"✅ Stored {written}/{len(documents)} episode rows for run {run_id}")
            return written
        except Exception as batch_error:
            logger.warning(f"⚠️  insert_many failed, falling back to individual inserts: {batch_error}")

        written = 0
        errors: List[str] = []
        for document in documents:
            try:
                self.episodes.insert_one(document)
                written += 1
            except Exception as doc_error:
                errors.append(f"seed {document.get('seed', 'unknown')}: {doc_error}")
        for error in errors:
            logger.error(f"   ❌ Failed to store episode row {error}")
        logger.info(f"✅ Stored {written}/{len(documents)} episode rows for run {run_id}")
        return written

    def insert_report(self, run_id: str, report: Mapping[str, Any]) -> str:
        self._require()
        document = {
            '_id': str(uuid.uuid4()),
            'run_id': run_id,
            'created_at': datetime.now(timezone.utc).isoformat(),
            'report': _portable(dict(report)),
        }
        self.reports.insert_one(document)
        logger.info(f"✅ Stored report for run {run_id}")
        return document['_id']

    def get_run(self, run_id: str) -> Dict[str, Any]:
        """Episodes and the latest report stored under `run_id`"""
        self._require()
        episodes = list(self.episodes.find({'run_id': run_id}))
        reports = sorted(self.reports.find({'run_id': run_id}), key=lambda d: d.get('created_at', ''))
        return {
            'run_id': run_id,
            'episodes': sorted(episodes, key=lambda d: (str(d.get('method', '')), d.get('seed', 0))),
            'report': reports[-1]['report'] if reports else None,
        }

    def get_store_info(self) -> Dict[str, str]:
        return {
            "type": self.db_type,
            "status": "connected" if self.enabled else "disabled",
        }


def push_results(run_id: str, rows: Sequence[Mapping[str, Any]], report: Mapping[str, Any],
                 store: Optional[ResultsStore] = None) -> Dict[str, Any]:
    """
    Push an evaluation to the configured sink

    Sink failures are logged and summarized; they never raise.
    """
    try:
        store = store or ResultsStore()
        if not store.enabled:
            logger.warning("⚠️  --store given but RESULTS_DB_TYPE is 'none'; nothing pushed")
            return {'success': False, 'message': 'results store disabled', 'stored_rows': 0}
        stored = store.insert_episode_rows(run_id, rows)
        report_id = store.insert_report(run_id, report)
        message = f"Stored {stored}/{len(rows)} episode rows and report {report_id}"
        return {'success': stored == len(rows), 'message': message, 'stored_rows': stored, 'report_id': report_id}
    except Exception as e:
        logger.warning(f"⚠️  Results store unavailable: {e}")
        return {'success': False, 'message': f'Store failed: {e}', 'stored_rows': 0}
