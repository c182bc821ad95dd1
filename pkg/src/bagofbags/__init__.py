"""Manuscript join retrieval with page-adaptive visual-word vocabularies.

The pipeline turns binarized fragment images into sets of character patches,
embeds them with a sparse convolutional autoencoder, summarizes each page as
a small bag of prototype vectors with masses, and ranks pages by set-to-set
distances (Chamfer, assignment, optimal transport).  Shared-codebook
bag-of-words baselines and a two-stage shortlist-rerank pipeline are included
for comparison, together with the retrieval metrics used to score them.
"""

__version__ = "0.1.0"
