"""Object-centric layout-to-image GAN with scene-graph similarity supervision."""

__version__ = "0.1.0"
