from fei3d import (
    build_classifier,
    classification_report,
    fit,
    logger,
    RngState,
    save_checkpoint,
    synth_generate,
)
from fei3d.data import split_dataset
from fei3d.models import CheckpointMeta, SynthSpec, TrainConfig

# 生成一份带 VA 标注的合成数据，代替真实的 EMOCA 参数
spec = SynthSpec(n_samples=2000, label_space="affect8", with_va=True)
data_rng, init_rng = RngState(42).split(2)
dataset = synth_generate(spec, data_rng)
train, val = split_dataset(dataset, 1600)

model = build_classifier(
    train.dim,  # 输入维度，emoca_short 为 156
    "affectnet_8_va",  # 8 类表情 + valence / arousal
    init_rng,
    hidden_width=256,  # 默认 2048，这里用小一些的网络
)
cfg = TrainConfig(batch_size=64, max_epochs=20, patience=3, seed=42)

# loss_selector 为 None 时按输出头选择损失，affectnet_8_va 使用组合损失
model, history = fit(model, train, None, cfg, val)
for record in history:
    logger.info(f"epoch {record.epoch}: val_loss={record.val_loss:.4f}")

outputs = model.predict(val.features)
report = classification_report(val.labels, outputs[:, :8].argmax(axis=1), 8)
logger.info(f"accuracy={report.accuracy:.4f} macro f1={report.macro.f1:.4f}")

save_checkpoint(model, CheckpointMeta(epoch=history[-1].epoch, seed=42), "model.ckpt")
