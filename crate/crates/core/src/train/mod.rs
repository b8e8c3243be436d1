//! Training machinery: schedules, losses, the optimizer, and the loops
//! that tie them to the model.

mod adamw;
mod dpo;
mod losses;
mod schedule;
mod trainer;

pub use adamw::{AdamW, AdamWConfig};
pub use dpo::{dpo_loss, dpo_loss_tape, DpoConfig, PreferencePair};
pub use losses::{load_balancing_loss, load_balancing_loss_tape, sft_loss};
pub use schedule::{cosine_lr_at, lr_at, CosineScheduleSpec, MultiStepScheduleSpec};
pub use trainer::{
    dpo_loop, score_pair, train_loop, ScheduleKind, TrainConfig, TrainOutcome,
};
