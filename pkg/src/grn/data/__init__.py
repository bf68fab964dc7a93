from .dataset import (
    DatasetManifest,
    ManifestEntry,
    PairSampler,
    SamplePair,
    SplitData,
    document_id,
    prepare_splits,
    read_manifest,
    sample_pairs,
    scan_dataset,
)
from .images import crop_margins, load_gray, pad_to_square, prepare_page, prepare_word, resize, save_gray, split_page9
from .synth import SyntheticCorpusSpec, generate_synthetic, writer_styles
