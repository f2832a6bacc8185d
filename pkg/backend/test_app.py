"""
Mock-based unit tests for the HTTP API.

Tests the endpoints with a mocked pipeline:
- Health check with per-stage status
- Recommendation request validation and responses
- Mapping of pipeline errors to status codes
- The evaluation report
"""

import json
import unittest
from unittest.mock import MagicMock, patch

import app as app_module
from config import Config
from errors import DependencyError, InputError, StaleArtifactError
from experiment_service import STAGES
from metrics import MetricsReport


def _mock_pipeline(complete=True):
    pipeline = MagicMock()
    pipeline.config.ABLATION = 'none'
    pipeline.hashes = {stage: f'hash-{stage}' for stage in STAGES}
    pipeline.store.is_complete.return_value = complete
    return pipeline


class TestApi(unittest.TestCase):
    """Test cases for the API endpoints."""

    @classmethod
    def setUpClass(cls):
        cls.app = app_module.configure_app(Config(), pipeline=_mock_pipeline())
        cls.app.testing = True

    def setUp(self):
        self.pipeline = _mock_pipeline()
        patcher = patch.object(app_module, '_pipeline', self.pipeline)
        patcher.start()
        self.addCleanup(patcher.stop)
        self.client = self.app.test_client()

    def _get(self, url):
        response = self.client.get(url)
        return response, json.loads(response.data)

    def test_health_ready(self):
        response, data = self._get('/api/health')
        self.assertEqual(response.status_code, 200)
        self.assertTrue(data['ready'])
        self.assertEqual(list(data['stages']), list(STAGES))
        self.assertEqual(data['ablation'], 'none')

    def test_health_not_ready(self):
        self.pipeline.store.is_complete.return_value = False
        response, data = self._get('/api/health')
        self.assertEqual(response.status_code, 200)
        self.assertFalse(data['ready'])

    def test_recommend_success(self):
        self.pipeline.recommend.return_value = [(1, 'A00003', -0.5), (2, 'A00007', -1.25)]
        response, data = self._get('/api/recommend?user=u1&domain=A&k=2')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(data['status'], 'success')
        self.assertEqual(data['items'][0], {'rank': 1, 'item_id': 'A00003', 'logprob': -0.5})
        self.pipeline.recommend.assert_called_once_with('u1', 'A', k=2, beam=None)

    def test_recommend_missing_parameters(self):
        response, data = self._get('/api/recommend?user=u1')
        self.assertEqual(response.status_code, 400)
        self.assertEqual(data['code'], 'VALIDATION_ERROR')
        self.pipeline.recommend.assert_not_called()

    def test_recommend_non_positive_k(self):
        response, data = self._get('/api/recommend?user=u1&domain=A&k=0')
        self.assertEqual(response.status_code, 400)
        self.assertEqual(data['code'], 'VALIDATION_ERROR')

    def test_recommend_unknown_user(self):
        self.pipeline.recommend.side_effect = InputError("Unknown user 'ghost'")
        response, data = self._get('/api/recommend?user=ghost&domain=A')
        self.assertEqual(response.status_code, 400)
        self.assertEqual(data['code'], 'INPUT_ERROR')
        self.assertEqual(data['status'], 'error')
        self.assertIn('timestamp', data)

    def test_recommend_missing_artifacts(self):
        self.pipeline.recommend.side_effect = DependencyError("Missing upstream stage 'data'", stage='data')
        response, data = self._get('/api/recommend?user=u1&domain=A')
        self.assertEqual(response.status_code, 503)
        self.assertEqual(data['code'], 'MISSING_UPSTREAM')

    def test_unexpected_error_is_hidden(self):
        self.pipeline.recommend.side_effect = RuntimeError('boom')
        response, data = self._get('/api/recommend?user=u1&domain=A')
        self.assertEqual(response.status_code, 500)
        self.assertEqual(data['code'], 'INTERNAL_ERROR')
        self.assertNotIn('boom', data['message'])

    def test_metrics(self):
        report = MetricsReport(7, 'abc', [5, 10])
        report.add_domain('A', [(['x', 'y'], 'y')], excluded=1)
        self.pipeline.report.return_value = report
        response, data = self._get('/api/metrics')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(data['report']['seed'], 7)
        self.assertEqual(data['report']['domains']['A']['recall@5'], 1.0)

    def test_metrics_stale(self):
        self.pipeline.report.side_effect = StaleArtifactError("stale", stage='evaluate')
        response, data = self._get('/api/metrics')
        self.assertEqual(response.status_code, 503)
        self.assertEqual(data['code'], 'STALE_ARTIFACT')


if __name__ == '__main__':
    unittest.main()
