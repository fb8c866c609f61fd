/// A configuration small enough that every stage finishes in seconds.
pub const TINY_CONFIG: &str = "\
task = marked
data.seq_len = 12
data.n_values = 3
data.train_size = 96
data.val_size = 48
data.test_size = 48

model.seq_len = 12
model.hidden = 8
model.layers = 4
model.heads = 4
model.ffn_dim = 8

train.optimizer.learning_rate = 0.01
train.batch_size = 32

stages.dense_epochs = 1
stages.scratch_epochs = 1
stages.finetune_epochs = 1
stages.adapt_epochs = 1

bench.warmup = 1
bench.repeats = 1
bench.examples = 32

run.seeds = 1, 2
run.data_seeds = 1, 2
";
