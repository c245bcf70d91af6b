"""Dense 2D-3D surface correspondence toolkit.

Mesh geodesics, pixel-to-vertex classification, correspondence generation,
training losses with analytic gradients, cross-modality token fusion and
evaluation (GPS AP/AR, re-identification mAP/CMC).
"""

from .mesh import (EdgeGraph, MeshError, MeshValidationError, ObjParseError, TriangleMesh,
                   build_edge_graph, load_mesh, make_test_mesh, write_mesh)
from .geodesics import GeodesicCache, build_cache, geodesic_from, scale
from .correspondence import (Camera, Correspondence, CorrespondenceSet,
                             generate_pseudo_correspondences, kmeans, link_cross_view,
                             project_vertices, read_corrs, sample_annotation_pixels, write_corrs)
from .embedding import (EmbeddingField, VertexEmbeddingTable, classify_pixel, cosine_distance,
                        pca_project, predict_vertices)
from .losses import (LossReport, LossWeights, check_gradient, loss_consistency, loss_geodesic,
                     loss_id, loss_silhouette, loss_total, loss_triplet, optimize_embeddings)
from .fusion import (FusionParams, LatentEncoder, TokenMap, cross_fuse, lcp_project, mha,
                     train_autoencoder)
from .metrics import GpsConfig, RetrievalInstance, gps, gps_ap_ar, reid_eval

__version__ = "0.1.0"
