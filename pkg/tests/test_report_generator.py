import csv

import numpy as np

from modules.metrics import report
from modules.pipeline import ComparisonTable
from modules.report_generator import ReportGenerator, report_as_table, to_markdown, write_csv, write_markdown


def two_column_table():
    return ComparisonTable(
        columns=['REAL', 'Synth 3'],
        rows=['J heart', 'J average'],
        values={'J heart': {'REAL': 0.81234, 'Synth 3': 0.9}, 'J average': {'REAL': 0.7, 'Synth 3': 0.7}},
        notes=['Reference note']
    )


def test_csv_holds_raw_values_and_best(tmp_path):
    path = write_csv(two_column_table(), str(tmp_path / 'out' / 'table.csv'))
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['metric', 'REAL', 'Synth 3', 'best']
    assert rows[1] == ['J heart', '0.81234', '0.9', 'Synth 3']
    assert rows[2][-1] == 'REAL;Synth 3'


def test_markdown_percentages_and_bold():
    text = to_markdown(two_column_table(), title='Results')
    assert text.startswith('## Results')
    assert '| J heart | 81.23 | **90.00** |' in text
    assert '| J average | **70.00** | **70.00** |' in text
    assert '> Reference note' in text


def test_single_column_is_never_bold(tmp_path):
    rng = np.random.default_rng(0)
    result = report([(rng.integers(0, 6, size=(8, 8)), rng.integers(0, 6, size=(8, 8)))])
    table = report_as_table(result, column='micro')
    assert table.columns == ['micro'] and len(table.rows) == 8
    path = write_markdown(table, str(tmp_path / 'metrics.md'))
    with open(path) as f:
        assert '**' not in f.read()


def test_pdf_report(tmp_path):
    probes = {'smoke': {'label_sanity': {'all_passed': 1.0, 'heart_present': 1.0, 'lungs_disjoint': 1.0},
                        'diversity': {'variance_mean': 0.01, 'nn_mean': None}}}
    path = ReportGenerator(two_column_table(), 'Run comparison', probes).generate_pdf_report(
        str(tmp_path / 'reports' / 'comparison.pdf'))
    with open(path, 'rb') as f:
        assert f.read(4) == b'%PDF'


def test_generated_data_rows_list_label_and_image_variance():
    probes = {
        'three': {'label_sanity': {'all_passed': 0.5}, 'diversity': {'variance_mean': 0.25, 'nn_mean': 0.1},
                  'image_diversity': {'variance_mean': 0.0125}},
        'labels_only': {'label_sanity': {}, 'diversity': {'variance_mean': 0.5, 'nn_mean': None}}
    }
    rows = ReportGenerator(two_column_table(), 'Run comparison', probes).generated_data_rows()
    assert rows[0][4:6] == ['Label variance', 'Image variance']
    assert rows[1] == ['three', '50.0%', '0.0%', '0.0%', '0.2500', '0.0125', '0.1000']
    assert rows[2][4:] == ['0.5000', 'n/a', 'n/a']
