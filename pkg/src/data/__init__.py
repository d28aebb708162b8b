from src.data.dataset import DatasetLoader, Sample, SampleSet, load_dataset, load_folder
from src.data.folds import FoldPlan, holdout_split, make_folds
from src.data.images import binarize, load_image, load_mask, resize
from src.data.netpbm import decode_netpbm, encode_netpbm, read_netpbm, write_netpbm
from src.data.synth import Ellipse, SyntheticGenerator, ellipse_mask, synth_dataset
