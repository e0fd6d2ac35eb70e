"""Spatial distance joins with learned partitioner reuse."""
from .config import EngineConfig, load_config, parse_config
from .datasets import Dataset, DatasetMetadata, PointReader, enlarge, ingest, write_points
from .embedding import DatasetEmbedding, embed
from .forest import DecisionForest, DecisionSample
from .geometry import Point, Polygon, Rect
from .histogram import GridHistogram, build_histogram, jsd, normalize
from .join import JoinEngine, JoinQuery, JoinResult, JoinStats, nested_loop_join
from .quadtree import QuadtreePartitioner
from .repository import Repository
from .siamese import SiameseModel

__version__ = "0.1.0"
