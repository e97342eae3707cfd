"""Case-based similar-slide retrieval at desk scale.

Attention-based multiple-instance learning selects informative patches
from weakly annotated cases, contrastive metric learning shapes an
embedding around staining-pattern relevance, and a chamfer-style case
distance ranks database cases for a query.
"""

__version__ = "0.1.0"
