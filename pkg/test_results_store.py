import numpy as np
import pytest

from errors import ConfigurationError
from results_store import ResultsStore, push_results


class FakeCollection:
    """In-memory stand-in for a MongoDB / Data API collection"""

    def __init__(self, fail_batch: bool = False, reject_seed=None):
        self.documents = []
        self.fail_batch = fail_batch
        self.reject_seed = reject_seed

    def insert_many(self, documents):
        if self.fail_batch:
            raise RuntimeError("batch write refused")
        self.documents.extend(documents)
        return type("Result", (), {'inserted_ids': [d['_id'] for d in documents]})()

    def insert_one(self, document):
        if self.reject_seed is not None and document.get('seed') == self.reject_seed:
            raise RuntimeError("duplicate key")
        self.documents.append(document)

    def find(self, query):
        return [d for d in self.documents if all(d.get(k) == v for k, v in query.items())]


def fake_store(**episode_options) -> ResultsStore:
    store = ResultsStore('none')
    store.db_type = 'mongodb'
    store.episodes = FakeCollection(**episode_options)
    store.reports = FakeCollection()
    return store


ROWS = [
    {'method': 'greedy_value', 'seed': 2, 'ens_mwh': np.float64(1.5), 'replans': np.int64(4)},
    {'method': 'greedy_value', 'seed': 1, 'ens_mwh': 2.0, 'replans': 3},
]


def test_disabled_store_reports_and_refuses():
    store = ResultsStore('none')
    assert not store.enabled
    assert store.get_store_info() == {'type': 'none', 'status': 'disabled'}
    with pytest.raises(ConfigurationError):
        store.insert_episode_rows('r', ROWS)


def test_unknown_backend_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        ResultsStore('cassandra')


def test_hcd_needs_credentials(monkeypatch):
    for name in ('HCD_API_ENDPOINT', 'HCD_USERNAME', 'HCD_PASSWORD'):
        monkeypatch.delenv(name, raising=False)
    with pytest.raises(ConfigurationError, match="HCD configuration incomplete"):
        ResultsStore('hcd')


def test_rows_are_stored_as_plain_values():
    store = fake_store()
    assert store.insert_episode_rows('run-1', ROWS) == 2
    stored = store.episodes.documents
    assert {d['run_id'] for d in stored} == {'run-1'}
    assert type(stored[0]['ens_mwh']) is float
    assert type(stored[0]['replans']) is int


def test_batch_failure_falls_back_to_single_inserts():
    store = fake_store(fail_batch=True, reject_seed=1)
    assert store.insert_episode_rows('run-1', ROWS) == 1
    assert [d['seed'] for d in store.episodes.documents] == [2]


def test_get_run_returns_sorted_episodes_and_latest_report():
    store = fake_store()
    store.insert_episode_rows('run-1', ROWS)
    store.insert_episode_rows('run-2', ROWS[:1])
    store.insert_report('run-1', {'methods': {'greedy_value': {'scenarios': 2}}})
    run = store.get_run('run-1')
    assert [d['seed'] for d in run['episodes']] == [1, 2]
    assert run['report']['methods']['greedy_value']['scenarios'] == 2
    assert store.get_run('run-3') == {'run_id': 'run-3', 'episodes': [], 'report': None}


def test_push_results_summarizes_outcomes():
    outcome = push_results('run-1', ROWS, {'methods': {}}, store=fake_store())
    assert outcome['success'] and outcome['stored_rows'] == 2

    partial = push_results('run-1', ROWS, {'methods': {}}, store=fake_store(fail_batch=True, reject_seed=2))
    assert not partial['success'] and partial['stored_rows'] == 1

    disabled = push_results('run-1', ROWS, {'methods': {}}, store=ResultsStore('none'))
    assert disabled == {'success': False, 'message': 'results store disabled', 'stored_rows': 0}


def test_push_results_never_raises(monkeypatch):
    monkeypatch.setenv('RESULTS_DB_TYPE', 'bogus')
    outcome = push_results('run-1', ROWS, {'methods': {}})
    assert not outcome['success']
    assert 'Store failed' in outcome['message']
