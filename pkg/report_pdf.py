"""
PDF report for an ExperimentReport
Title block, criteria table colored by verdict, measured quantities, and density images
"""

import io
from typing import Optional

from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER, TA_JUSTIFY
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Image as RLImage
from reportlab.platypus import KeepTogether, PageBreak, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from density_image import create_thumbnail, legend_rows, png_bytes, render_density
from provenance import TOOL_NAME, TOOL_VERSION

VERDICT_COLORS = {
    True: (colors.HexColor('#10B981'), colors.white),
    False: (colors.HexColor('#DC2626'), colors.white),
}


class ReportTemplate:
    """Header band with the tool name, footer with scenario id and page number"""

    def __init__(self, scenario: str, config_hash: str):
        self.scenario = scenario
        self.config_hash = config_hash

    def header(self, canvas, doc):
        canvas.saveState()
        canvas.setFillColorRGB(0.06, 0.05, 0.16)
        canvas.rect(0, A4[1] - 80, A4[0], 80, fill=1, stroke=0)
        canvas.setFillColorRGB(0, 0.96, 1)
        canvas.setFont('Helvetica-Bold', 22)
        canvas.drawString(40, A4[1] - 45, TOOL_NAME.upper())
        canvas.setFillColorRGB(0.63, 0.63, 1)
        canvas.setFont('Helvetica', 10)
        canvas.drawString(40, A4[1] - 65, f"McKean-Vlasov laboratory {TOOL_VERSION}")
        canvas.restoreState()

    def footer(self, canvas, doc):
        canvas.saveState()
        canvas.setFillColorRGB(0.06, 0.05, 0.16)
        canvas.rect(0, 0, A4[0], 50, fill=1, stroke=0)
        canvas.setFillColorRGB(0.8, 0.8, 1)
        canvas.setFont('Helvetica', 8)
        canvas.drawString(40, 22, f"{self.scenario}  |  config {self.config_hash[:16]}")
        canvas.drawRightString(A4[0] - 40, 22, f"Page {doc.page}")
        canvas.restoreState()


def create_custom_styles():
    styles = getSampleStyleSheet()
    styles.add(ParagraphStyle(
        name='CustomTitle',
        parent=styles['Heading1'],
        fontSize=22,
        textColor=colors.HexColor('#0080FF'),
        spaceAfter=18,
        alignment=TA_CENTER,
        fontName='Helvetica-Bold',
        leading=28,
    ))
    styles.add(ParagraphStyle(
        name='SectionHeader',
        parent=styles['Heading2'],
        fontSize=14,
        textColor=colors.HexColor('#0080FF'),
        spaceAfter=10,
        spaceBefore=16,
        fontName='Helvetica-Bold',
        leading=18,
    ))
    styles.add(ParagraphStyle(
        name='CustomNormal',
        parent=styles['Normal'],
        fontSize=9,
        textColor=colors.HexColor('#303030'),
        spaceAfter=6,
        alignment=TA_JUSTIFY,
        fontName='Helvetica',
        leading=12,
    ))
    return styles


def _criteria_table(report, styles) -> Table:
    rows = [['Criterion', 'Verdict', 'Detail']]
    for c in report.criteria:
        rows.append([c.name, 'PASS' if c.passed else 'FAIL', Paragraph(c.detail, styles['CustomNormal'])])
    table = Table(rows, colWidths=[1.6 * inch, 0.8 * inch, 4.2 * inch])
    style = [
        ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#E8F4FF')),
        ('TEXTCOLOR', (0, 0), (-1, 0), colors.HexColor('#0080FF')),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTSIZE', (0, 0), (-1, -1), 9),
        ('GRID', (0, 0), (-1, -1), 0.5, colors.HexColor('#CCCCCC')),
        ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
        ('PADDING', (0, 0), (-1, -1), 6),
    ]
    for row, c in enumerate(report.criteria, 1):
        background, text = VERDICT_COLORS[c.passed]
        style += [('BACKGROUND', (1, row), (1, row), background), ('TEXTCOLOR', (1, row), (1, row), text)]
    table.setStyle(TableStyle(style))
    return table


def _measured_table(report) -> Table:
    rows = [['Quantity', 'Value', '+/-']]
    for name, m in report.measured.items():
        rows.append([name, f"{m.value:.6g}", f"{m.half_width:.3g}" if m.half_width else ''])
    table = Table(rows, colWidths=[2.6 * inch, 2.0 * inch, 2.0 * inch])
    table.setStyle(TableStyle([
        ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#F0F8FF')),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTSIZE', (0, 0), (-1, -1), 9),
        ('GRID', (0, 0), (-1, -1), 0.5, colors.HexColor('#CCCCCC')),
        ('PADDING', (0, 0), (-1, -1), 6),
    ]))
    return table


def generate_pdf_report(report, output_path: Optional[str] = None):
    """
    Render an ExperimentReport as PDF

    Args:
        report: ExperimentReport
        output_path: file path, or None for an in-memory buffer

    Returns:
        BytesIO with the PDF when output_path is None, else output_path
    """
    output = io.BytesIO() if output_path is None else output_path
    # invariant=1 fixes the document id and timestamps so identical reports give identical bytes
    doc = SimpleDocTemplate(output, pagesize=A4, rightMargin=40, leftMargin=40, topMargin=100, bottomMargin=70,
                            invariant=1, title=f"{TOOL_NAME} {report.scenario}")
    template = ReportTemplate(report.scenario, report.config_hash)
    styles = create_custom_styles()
    story = [
        Paragraph(f"Scenario: {report.scenario}", styles['CustomTitle']),
        Paragraph(f"Config hash: <b>{report.config_hash}</b>", styles['CustomNormal']),
        Paragraph(f"Overall verdict: <b>{'PASSED' if report.passed else 'FAILED'}</b>", styles['CustomNormal']),
        Spacer(1, 12),
        Paragraph('Criteria', styles['SectionHeader']),
        _criteria_table(report, styles),
        Spacer(1, 12),
        Paragraph('Measured quantities', styles['SectionHeader']),
        _measured_table(report),
    ]

    if report.densities:
        story.append(PageBreak())
        story.append(Paragraph('Densities', styles['SectionHeader']))
        for name, density in sorted(report.densities.items()):
            image, legend = render_density(density, title=name)
            picture = RLImage(png_bytes(create_thumbnail(image, (600, 450))), width=6 * inch, height=4.5 * inch,
                              kind='proportional')
            legend_table = Table(legend_rows(legend), colWidths=[0.5 * inch, 3.5 * inch, 1.5 * inch])
            legend_table.setStyle(TableStyle([
                ('FONTSIZE', (0, 0), (-1, -1), 8),
                ('GRID', (0, 0), (-1, -1), 0.5, colors.HexColor('#CCCCCC')),
            ]))
            story.append(KeepTogether([Paragraph(f"<b>{name}</b>", styles['CustomNormal']), picture,
                                       Spacer(1, 6), legend_table]))
            story.append(Spacer(1, 15))

    doc.build(
        story,
        onFirstPage=lambda c, d: (template.header(c, d), template.footer(c, d)),
        onLaterPages=lambda c, d: (template.header(c, d), template.footer(c, d)),
    )
    if output_path is None:
        output.seek(0)
    return output
