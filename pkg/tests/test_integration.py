import json
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
from cli_app import main  # noqa: E402
from oracle_planner import read_dataset  # noqa: E402
from pastel_model import load_checkpoint  # noqa: E402
from run_manifest import load_manifest  # noqa: E402

pytestmark = [pytest.mark.integration, pytest.mark.slow]


@pytest.fixture
def run_config(tmp_path):
    """Tiny end-to-end configuration writing everything under tmp_path"""
    spec = tmp_path / 'reach.stl'
    spec.write_text('F[0,10](R1)\n')
    config = {
        'format_version': 1,
        'spec_files': {'reach': str(spec)},
        'dataset': {'path': str(tmp_path / 'data' / 'dataset.jsonl'), 'per_spec_count': 3, 'seed': 11},
        'oracle': {'max_iterations': 80, 'restarts': 2, 'success_floor': 0.0},
        'model': {'d_model': 8, 'n_heads': 2, 'n_layers': 1, 'd_tok': 4, 'ff_mult': 2, 'dropout': 0.0},
        'train': {'dataset_path': str(tmp_path / 'data' / 'dataset.jsonl'), 'out_dir': str(tmp_path / 'train'),
                  'batch_size': 2, 'epochs': 1, 'dtype': 'float64'},
        'eval': {'n_samples': 2, 'seed': 5, 'out_dir': str(tmp_path / 'eval')},
        'jobs': 1,
    }
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(config))
    return str(path)


class TestIntegration:
    """Generate, verify, train and evaluate through the command line"""

    def test_end_to_end(self, run_config, tmp_path, capsys):
        base = ['--config', run_config]

        assert main(base + ['gen-data']) == 0
        records = read_dataset(str(tmp_path / 'data' / 'dataset.jsonl'))
        assert records and all(r.spec_id == 'reach' for r in records)
        assert load_manifest(str(tmp_path / 'data' / 'manifest.json')).seeds == {'dataset': 11}

        assert main(base + ['dataset-verify', '--margin', '0.05']) == 0

        assert main(base + ['train']) == 0
        checkpoint = str(tmp_path / 'train' / 'checkpoint.bin')
        assert load_checkpoint(checkpoint).cfg.d_model == 8
        assert (tmp_path / 'train' / 'metrics.csv').exists()
        assert (tmp_path / 'train' / 'manifest.json').exists()

        capsys.readouterr()
        assert main(base + ['--format', 'json', 'eval', '--checkpoint', checkpoint]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report['specs'][0]['spec_id'] == 'reach'
        assert 0.0 <= report['specs'][0]['satisfaction_percentage'] <= 100.0
        assert report['specs'][0]['actuation']['n_actions'] == 2 * 10

    def test_generation_is_reproducible(self, run_config, tmp_path):
        dataset = tmp_path / 'data' / 'dataset.jsonl'
        assert main(['--config', run_config, 'gen-data']) == 0
        first = dataset.read_bytes()
        assert main(['--config', run_config, 'gen-data', '--jobs', '2']) == 0
        assert dataset.read_bytes() == first

    def test_ablation_run(self, run_config, tmp_path):
        assert main(['--config', run_config, 'gen-data']) == 0
        out_dir = str(tmp_path / 'pact')
        assert main(['--config', run_config, 'train', '--ablation', '--out-dir', out_dir]) == 0
        assert load_checkpoint(os.path.join(out_dir, 'checkpoint.bin')).cfg.ablation
