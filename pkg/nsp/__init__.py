"""
Neural Social Physics
Trajectory prediction with a learnable social force model and a residual CVAE
"""

__version__ = "1.0.0"
__description__ = "Neural social force model for pedestrian trajectory prediction and crowd simulation"
