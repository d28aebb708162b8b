import os
import shutil

import pandas as pd
import pytest
from click.testing import CliRunner

from main import cli
from src.data.dataset import load_dataset
from src.data.folds import make_folds
from src.utils.manifest import RunManifest

from tests.conftest import tree_bytes

TINY = ['--widths', '8,16,32,64', '--rounding', 'floor']


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def dataset(runner, tmp_path):
    root = str(tmp_path / 'data')
    result = runner.invoke(cli, ['synth', '--out', root, '--n', '8', '--size', '16', '--seed', '3', '--jobs', '1'])
    assert result.exit_code == 0, result.output
    return root


def test_synth_layout(dataset):
    assert len(os.listdir(os.path.join(dataset, 'images'))) == 8
    assert len(os.listdir(os.path.join(dataset, 'masks'))) == 8
    assert os.path.exists(os.path.join(dataset, 'manifest.json'))


def test_synth_rerun_is_byte_identical(runner, dataset):
    before = tree_bytes(dataset)
    result = runner.invoke(cli, ['synth', '--out', dataset, '--n', '8', '--size', '16', '--seed', '3', '--jobs', '1'])
    assert result.exit_code == 0
    assert tree_bytes(dataset) == before


def test_synth_rejects_indivisible_size(runner, tmp_path):
    result = runner.invoke(cli, ['synth', '--out', str(tmp_path / 'x'), '--size', '60'])
    assert result.exit_code == 1
    assert 'multiple of 8' in result.output


def test_params_prints_published_totals(runner):
    result = runner.invoke(cli, ['params'])
    assert result.exit_code == 0, result.output
    assert '6,028,833' in result.output
    assert '14,787,777' in result.output
    assert 'Ratio sdu/unet' in result.output
    assert 'Delta' in result.output


def test_params_without_norm(runner, tmp_path):
    out = str(tmp_path / 'params')
    result = runner.invoke(cli, ['params', '--no-norm', '--out', out])
    assert result.exit_code == 0, result.output
    assert '3,755,137' in result.output
    assert '8,556,353' in result.output
    assert '-2,273,696' in result.output
    assert '-6,231,424' in result.output
    frame = pd.read_csv(os.path.join(out, 'params.csv'))
    assert frame.groupby('model')['count'].sum().to_dict() == {'sdu': 3_755_137, 'unet': 8_556_353}
    totals = pd.read_csv(os.path.join(out, 'totals.csv')).set_index('model')
    assert totals.loc['sdu', 'delta'] == 3_755_137 - 6_028_833
    assert totals.loc['unet', 'delta'] == 8_556_353 - 14_787_777
    assert os.path.exists(os.path.join(out, 'manifest.json'))


@pytest.mark.parametrize('arch, expected', [('sdu', '{3,7,15,31,63}'), ('unet', '{5}'), ('single', '{3}')])
def test_receptive_fields(runner, arch, expected):
    result = runner.invoke(cli, ['rf', '--arch', arch, '--verify'])
    assert result.exit_code == 0, result.output
    assert expected in result.output
    assert 'Impulse check passed' in result.output


def test_folds_match_library(runner, dataset, tmp_path):
    out = str(tmp_path / 'plan' / 'folds.csv')
    result = runner.invoke(cli, ['folds', '--data', dataset, '--k', '4', '--seed', '2', '--out', out])
    assert result.exit_code == 0, result.output
    written = pd.read_csv(out, dtype={'id': str})
    pd.testing.assert_frame_equal(written, make_folds(load_dataset(dataset), 4, 2).to_frame())


def test_crossval_rejects_single_fold(runner, dataset, tmp_path):
    result = runner.invoke(cli, ['crossval', '--data', dataset, '--k', '1', '--out', str(tmp_path / 'cv')] + TINY)
    assert result.exit_code == 1
    assert 'k >= 2' in result.output


def test_train_then_eval(runner, dataset, tmp_path):
    run = str(tmp_path / 'run')
    result = runner.invoke(cli, ['train', '--data', dataset, '--out', run, '--epochs', '2', '--batch-size', '2',
                                 '--lr', '1e-3'] + TINY)
    assert result.exit_code == 0, result.output
    assert '=== Training Summary ===' in result.output
    assert os.path.exists(os.path.join(run, 'best.sduc'))

    scores = str(tmp_path / 'scores')
    overlays = str(tmp_path / 'overlays')
    result = runner.invoke(cli, ['eval', '--checkpoint', os.path.join(run, 'best.sduc'), '--data', dataset,
                                 '--out', scores, '--overlay-dir', overlays])
    assert result.exit_code == 0, result.output
    assert 'overall: dice' in result.output
    assert '±' in result.output
    assert len(pd.read_csv(os.path.join(scores, 'scores.csv'))) == 8
    assert len(os.listdir(overlays)) == 8


def test_train_with_missing_masks(runner, dataset, tmp_path):
    shutil.rmtree(os.path.join(dataset, 'masks'))
    result = runner.invoke(cli, ['train', '--data', dataset, '--out', str(tmp_path / 'run')] + TINY)
    assert result.exit_code == 2
    assert os.path.join(dataset, 'masks') in result.output


def test_eval_with_corrupt_checkpoint(runner, dataset, tmp_path):
    broken = tmp_path / 'broken.sduc'
    broken.write_bytes(b'JUNK' + bytes(64))
    result = runner.invoke(cli, ['eval', '--checkpoint', str(broken), '--data', dataset])
    assert result.exit_code == 2
    assert 'bad magic' in result.output


def test_train_with_config_file(runner, dataset, tmp_path):
    config = tmp_path / 'tiny.env'
    config.write_text('arch=unet\nwidths=8,16,32,64\nbatch_size=2\nlearning_rate=1e-3\n')
    run = str(tmp_path / 'run')
    result = runner.invoke(cli, ['train', '--data', dataset, '--config', str(config), '--out', run, '--epochs', '1'])
    assert result.exit_code == 0, result.output
    assert 'Architecture:      unet' in result.output


def test_unknown_config_key(runner, dataset, tmp_path):
    config = tmp_path / 'bad.env'
    config.write_text('dropout=0.5\n')
    result = runner.invoke(cli, ['train', '--data', dataset, '--config', str(config), '--out', str(tmp_path / 'r')])
    assert result.exit_code == 1
    assert 'dropout' in result.output


def test_replay_regenerates_dataset(runner, dataset):
    before = tree_bytes(dataset)
    shutil.rmtree(os.path.join(dataset, 'images'))
    result = runner.invoke(cli, ['replay', os.path.join(dataset, 'manifest.json')])
    assert result.exit_code == 0, result.output
    assert tree_bytes(dataset) == before


def test_compare_checkpoint_with_itself(runner, dataset, tmp_path):
    run = str(tmp_path / 'run')
    result = runner.invoke(cli, ['train', '--data', dataset, '--out', run, '--epochs', '1', '--batch-size', '4'] + TINY)
    assert result.exit_code == 0, result.output

    checkpoint = os.path.join(run, 'best.sduc')
    out = str(tmp_path / 'compare')
    result = runner.invoke(cli, ['compare', '--checkpoint-a', checkpoint, '--checkpoint-b', checkpoint,
                                 '--data', dataset, '--out', out])
    assert result.exit_code == 0, result.output
    assert 'Independent test on 8 images' in result.output
    assert 'paired t-test (image, n=8)' in result.output
    frame = pd.read_csv(os.path.join(out, 'compare.csv'))
    assert list(frame.columns) == ['id', 'sdu_a', 'sdu_b']
    assert (frame['sdu_a'] == frame['sdu_b']).all()
    assert os.path.exists(os.path.join(out, 'manifest.json'))


def test_report_commands_write_manifest_without_out(runner, tmp_path):
    for args in (['params', '--widths', '8,16,32,64'], ['rf', '--arch', 'unet']):
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        path = tmp_path / 'logs' / 'manifests' / f'{args[0]}.manifest.json'
        assert path.exists(), args[0]
        assert RunManifest.load(str(path)).command == args[0]


def test_eval_overlays_carry_manifest(runner, dataset, tmp_path):
    run = str(tmp_path / 'run')
    result = runner.invoke(cli, ['train', '--data', dataset, '--out', run, '--epochs', '1', '--batch-size', '4'] + TINY)
    assert result.exit_code == 0, result.output

    overlays = str(tmp_path / 'overlays')
    result = runner.invoke(cli, ['eval', '--checkpoint', os.path.join(run, 'best.sduc'), '--data', dataset,
                                 '--overlay-dir', overlays])
    assert result.exit_code == 0, result.output
    manifest = RunManifest.load(os.path.join(overlays, 'manifest.json'))
    assert manifest.command == 'eval'
    assert manifest.arguments['overlay_dir'] == overlays


def test_synth_rejects_negative_seed(runner, tmp_path):
    result = runner.invoke(cli, ['synth', '--out', str(tmp_path / 'x'), '--n', '2', '--size', '16', '--seed', '-1'])
    assert result.exit_code == 1
    assert '--seed' in result.output
    assert not (tmp_path / 'x').exists()
