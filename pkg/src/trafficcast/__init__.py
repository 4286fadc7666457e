"""Grid traffic movie forecasting: codec, synthetic city, sampling, models, training and evaluation."""
from .grid_codec import GridSpec, CodecParams, TrafficMovie, read_movie, write_movie
from .synth_world import SynthConfig, generate_city, generate_weather, simulate_day
from .exogenous import EXO_DIM, ExoProvider
from .sampler import Strategy, SequenceWindow, count_sequences, enumerate_windows, MovieStore, iter_batches
from .model_zoo import ModelConfig, build_model, rae_forward, convlstm_forward
from .objectives import LossWeights, MetricReport, mse_metric, training_loss
from .train_eval import Dataset, TrainConfig, Checkpoint, EvalProtocol, train, evaluate_challenge, \
    persistence_baseline, report_tables

__version__ = "0.1.0"
