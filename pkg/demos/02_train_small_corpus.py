"""Train a reduced model on the synthetic long-tail corpus with cRT-WC.

Same corpus and settings as the trend gate; about three minutes on one core.

    python demos/02_train_small_corpus.py
"""
import numpy as np

from singdc.dataset import CLASSES
from singdc.experiments import prepare_synthetic, trend_corpus
from singdc.metrics import compute_metrics
from singdc.model import ModelConfig, build_model
from singdc.training import TrainPlan, predict, train

data = prepare_synthetic(trend_corpus())
print("train", data.x_train.shape, "test", data.x_test.shape)
print("clips per class", np.bincount(data.y_train, minlength=10).tolist())

model = build_model(ModelConfig(placement="late").reduced(4), seed=0)
plan = TrainPlan("crt-wc", alpha=0.2, total_epochs=30, batch_size=16, lr=1e-3, seed=0)
result = train(model, data.x_train, data.y_train, plan,
               on_epoch=lambda r: print(f"epoch {r['epoch']:2d} {r['phase']:14s} loss {r['loss']:.3f}"))
print("class weights", np.round(result.class_weights.weights, 3).tolist())

report = compute_metrics(predict(model, data.x_test, 16), data.y_test, 10)
print(f"test macro-F1 {report.macro_f1:.3f}  B-Acc {report.balanced_accuracy:.3f}  top-3 {report.top3:.3f}")
for name, row in zip(CLASSES, report.confusion):
    print(f"  {name:10s} {row.tolist()}")
