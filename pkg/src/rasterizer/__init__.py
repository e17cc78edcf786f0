from src.rasterizer.backward import RasterGradients, render_backward
from src.rasterizer.forward import RenderOutput, render_forward, render_naive
from src.rasterizer.projection import ProjectedGaussian, project_gaussian, project_gaussians
from src.rasterizer.settings import RasterSettings
