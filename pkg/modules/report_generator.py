"""
Report Generator Module
Renders metrics reports and run comparisons as CSV, Markdown and PDF
"""

import os
import csv
import logging
from datetime import datetime
from typing import Dict, List, Optional

from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
from reportlab.lib.units import inch
from reportlab.lib.enums import TA_CENTER
from reportlab.lib import colors
from reportlab.platypus import SimpleDocTemplate, Paragraph, Spacer, Table, TableStyle
from reportlab.lib.colors import HexColor

from .metrics import MetricsReport
from .pipeline import ComparisonTable

logger = logging.getLogger(__name__)


def _percent(value: float) -> str:
    return f'{value * 100:.2f}'


def report_as_table(report: MetricsReport, column: str = 'value') -> ComparisonTable:
    """Single-column comparison table from one MetricsReport"""
    rows = report.rows()
    return ComparisonTable(
        columns=[column],
        rows=[label for label, _ in rows],
        values={label: {column: value} for label, value in rows}
    )


def write_csv(table: ComparisonTable, path: str) -> str:
    """Raw values, one row per metric, best columns listed last"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['metric'] + table.columns + ['best'])
        for row in table.rows:
            cells = table.values[row]
            writer.writerow([row] + [cells.get(c, '') for c in table.columns] + [';'.join(table.best(row))])
    logger.info(f"CSV report written: {path}")
    return path


def to_markdown(table: ComparisonTable, title: Optional[str] = None) -> str:
    """Percentages with two decimals; the best value of each row in bold"""
    lines = []
    if title:
        lines += [f'## {title}', '']
    lines.append('| Metric | ' + ' | '.join(table.columns) + ' |')
    lines.append('|---|' + '---:|' * len(table.columns))
    for row in table.rows:
        best = set(table.best(row))
        cells = []
        for column in table.columns:
            value = table.values[row].get(column)
            if value is None:
                cells.append('')
            elif column in best and len(table.columns) > 1:
                cells.append(f'**{_percent(value)}**')
            else:
                cells.append(_percent(value))
        lines.append(f'| {row} | ' + ' | '.join(cells) + ' |')
    for note in table.notes:
        lines += ['', f'> {note}']
    return '\n'.join(lines) + '\n'


def write_markdown(table: ComparisonTable, path: str, title: Optional[str] = None) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        f.write(to_markdown(table, title))
    logger.info(f"Markdown report written: {path}")
    return path


class ReportGenerator:
    """PDF summary of a comparison table, optionally with quality probe results"""

    def __init__(self, table: ComparisonTable, title: str = 'Segmentation Results',
                 probes: Optional[Dict[str, Dict]] = None):
        self.table = table
        self.title = title
        self.probes = probes or {}

    def generate_pdf_report(self, report_path: str) -> str:
        try:
            directory = os.path.dirname(report_path)
            if directory:
                os.makedirs(directory, exist_ok=True)

            doc = SimpleDocTemplate(
                report_path,
                pagesize=letter,
                rightMargin=54,
                leftMargin=54,
                topMargin=72,
                bottomMargin=36
            )
            styles = getSampleStyleSheet()
            self._add_custom_styles(styles)

            story = self._create_title(styles)
            story.extend(self._create_metrics_section(styles))
            if self.probes:
                story.append(Spacer(1, 0.3 * inch))
                story.extend(self._create_probes_section(styles))
            for note in self.table.notes:
                story.append(Spacer(1, 0.2 * inch))
                story.append(Paragraph(note, styles['Note']))

            doc.build(story)
            logger.info(f"PDF report generated: {report_path}")
            return report_path

        except Exception as e:
            logger.error(f"PDF generation error: {str(e)}")
            raise

    def _add_custom_styles(self, styles):
        styles.add(ParagraphStyle(
            name='CustomTitle',
            parent=styles['Heading1'],
            fontSize=20,
            textColor=HexColor('#1a1a1a'),
            spaceAfter=18,
            alignment=TA_CENTER,
            fontName='Helvetica-Bold'
        ))
        styles.add(ParagraphStyle(
            name='SectionHeader',
            parent=styles['Heading2'],
            fontSize=14,
            textColor=HexColor('#2c3e50'),
            spaceAfter=10,
            spaceBefore=10,
            fontName='Helvetica-Bold'
        ))
        styles.add(ParagraphStyle(
            name='Note',
            parent=styles['Normal'],
            fontSize=9,
            textColor=HexColor('#7f8c8d')
        ))

    def _create_title(self, styles) -> List:
        return [
            Paragraph(self.title, styles['CustomTitle']),
            Paragraph(f"Generated: {datetime.utcnow().strftime('%Y-%m-%d %H:%M:%S UTC')}", styles['Note']),
            Spacer(1, 0.2 * inch)
        ]

    def _table_style(self, header_color: str = '#2c3e50') -> TableStyle:
        return TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), HexColor(header_color)),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('ALIGN', (1, 0), (-1, -1), 'CENTER'),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, 0), 9),
            ('BOTTOMPADDING', (0, 0), (-1, 0), 8),
            ('GRID', (0, 0), (-1, -1), 0.5, colors.black),
            ('FONTNAME', (0, 1), (-1, -1), 'Helvetica'),
            ('FONTSIZE', (0, 1), (-1, -1), 8),
            ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, HexColor('#ecf0f1')])
        ])

    def _create_metrics_section(self, styles) -> List:
        elements = [Paragraph('Jaccard and Dice per class', styles['SectionHeader'])]
        data = [['Metric'] + self.table.columns]
        style = self._table_style()
        for r, row in enumerate(self.table.rows, start=1):
            best = set(self.table.best(row))
            line = [row]
            for c, column in enumerate(self.table.columns, start=1):
                value = self.table.values[row].get(column)
                line.append('' if value is None else _percent(value))
                if column in best and len(self.table.columns) > 1:
                    style.add('FONTNAME', (c, r), (c, r), 'Helvetica-Bold')
            data.append(line)

        width = min(1.3 * inch, 5.0 * inch / max(1, len(self.table.columns)))
        table = Table(data, colWidths=[1.8 * inch] + [width] * len(self.table.columns))
        table.setStyle(style)
        elements.append(table)
        return elements

    def generated_data_rows(self) -> List[List[str]]:
        """Header and one row per run; variances are listed for label maps and images"""
        data = [['Run', 'All checks', 'Heart present', 'Lungs disjoint', 'Label variance', 'Image variance',
                 'NN distance']]
        for run, probes in self.probes.items():
            sanity = probes.get('label_sanity', {})
            div = probes.get('diversity', {})
            image_div = probes.get('image_diversity', {})
            nn_mean = div.get('nn_mean')
            data.append([
                run,
                f"{sanity.get('all_passed', 0):.1%}",
                f"{sanity.get('heart_present', 0):.1%}",
                f"{sanity.get('lungs_disjoint', 0):.1%}",
                f"{div.get('variance_mean', 0):.4f}",
                'n/a' if not image_div else f"{image_div['variance_mean']:.4f}",
                'n/a' if nn_mean is None else f'{nn_mean:.4f}'
            ])
        return data

    def _create_probes_section(self, styles) -> List:
        elements = [Paragraph('Generated data probes', styles['SectionHeader'])]
        table = Table(self.generated_data_rows())
        table.setStyle(self._table_style('#34495e'))
        elements.append(table)
        return elements
