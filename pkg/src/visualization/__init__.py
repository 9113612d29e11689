# Visualization modules
from .charts import (
    channel_density_figure,
    per_class_bars,
    vertical_coverage_figure,
    write_html,
)
from .strips import (
    mask_gray,
    phase_rgb,
    read_pnm,
    track_strip,
    write_pgm,
    write_ppm,
)
from .tables import (
    frame_table,
    summary_table,
)
