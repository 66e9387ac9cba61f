"""Reference inventory of the 24 supported source datasets.

Each row records the dataset's task type, visual context, raw training-image
count, count of images passing the clarity filter, and the per-stratum
comprehension-complexity distribution of the clear images. The table feeds
planning fixtures and scale checks; loaders never require it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ingest import TaskType


@dataclass(frozen=True, slots=True)
class SourceDatasetInfo:
    dataset_id: str
    task: TaskType
    visual_context: str
    training_images: int
    clear_images: int
    complexity: tuple[int, int, int, int]


SOURCE_DATASETS: tuple[SourceDatasetInfo, ...] = (
    SourceDatasetInfo("DocVQA", TaskType.FQA, "Document Image", 8535, 8227, (2086, 6007, 125, 9)),
    SourceDatasetInfo("FigureQA", TaskType.FQA, "Charts and Plots", 18173, 18173, (687, 16792, 694, 0)),
    SourceDatasetInfo("DVQA", TaskType.FQA, "Bar Chart", 19092, 19092, (21, 18021, 1045, 5)),
    SourceDatasetInfo("PlotQA", TaskType.FQA, "Bar, Line, Scatter", 18782, 18782, (13, 18759, 10, 0)),
    SourceDatasetInfo("ChartQA", TaskType.FQA, "Charts and Plots", 3699, 3699, (0, 3649, 50, 0)),
    SourceDatasetInfo("MapQA", TaskType.FQA, "Map Chart", 10020, 10016, (1, 10015, 0, 0)),
    SourceDatasetInfo("IconQA", TaskType.MWP, "Abstract Scene", 20000, 19068, (10991, 8055, 22, 0)),
    SourceDatasetInfo("CLEVR-Math", TaskType.MWP, "Synthetic Scene", 17552, 17551, (1, 17550, 0, 0)),
    SourceDatasetInfo("TabMWP", TaskType.MWP, "Table", 20000, 20000, (14919, 5081, 0, 0)),
    SourceDatasetInfo("GEOS", TaskType.GPS, "Geometry Diagram", 66, 64, (2, 57, 5, 0)),
    SourceDatasetInfo("Geometry3K", TaskType.GPS, "Geometry Diagram", 2101, 2101, (21, 1508, 568, 4)),
    SourceDatasetInfo("GeoQA+", TaskType.GPS, "Geometry Diagram", 6027, 5956, (103, 4399, 1454, 0)),
    SourceDatasetInfo("UniGeo", TaskType.GPS, "Geometry Diagram", 3499, 3432, (72, 2514, 846, 0)),
    SourceDatasetInfo("TQA", TaskType.TQA, "Scientific Figure", 1499, 1497, (20, 949, 498, 30)),
    SourceDatasetInfo("AI2D", TaskType.TQA, "Scientific Figure", 3247, 3235, (32, 2321, 823, 59)),
    SourceDatasetInfo("ScienceQA", TaskType.TQA, "Scientific Figure", 6218, 6061, (1533, 4251, 273, 4)),
    SourceDatasetInfo("A-OKVQA", TaskType.VQA, "Natural Image", 16540, 14526, (10, 11724, 2743, 49)),
    SourceDatasetInfo("VQA2.0", TaskType.VQA, "Natural Image", 16912, 14521, (45, 12783, 1672, 21)),
    SourceDatasetInfo("PMC-VQA", TaskType.VQA, "Medical Image", 19682, 9846, (62, 2989, 3501, 3294)),
    SourceDatasetInfo("VizWiz", TaskType.VQA, "Natural Image", 20000, 16400, (790, 14800, 770, 40)),
    SourceDatasetInfo("Super-CLEVR", TaskType.VQA, "Synthetic Scene", 2000, 1950, (1, 1568, 381, 0)),
    SourceDatasetInfo("VQA-AS", TaskType.VQA, "Abstract Scene", 14065, 14065, (7, 13996, 62, 0)),
    SourceDatasetInfo("VQA-RAD", TaskType.VQA, "Medical Image", 259, 248, (0, 91, 95, 62)),
    SourceDatasetInfo("TextVQA", TaskType.VQA, "Natural Image", 15815, 11350, (179, 9497, 1598, 76)),
)


def by_id() -> dict[str, SourceDatasetInfo]:
    return {info.dataset_id: info for info in SOURCE_DATASETS}


def stratum_totals() -> tuple[int, int, int, int]:
    """Clear-image counts per complexity stratum, summed over all datasets."""
    totals = [0, 0, 0, 0]
    for info in SOURCE_DATASETS:
        for stratum in range(4):
            totals[stratum] += info.complexity[stratum]
    return tuple(totals)
