use std::cell::Cell;

use super::ClassId;

thread_local! {
    static TRAINING: Cell<u32> = const { Cell::new(0) };
}

/// Marks the current thread as running training code while alive. Opening a
/// [`SealedLabels`] on a marked thread panics.
pub struct TrainingGuard {
    _private: (),
}

impl TrainingGuard {
    pub fn enter() -> Self {
        TRAINING.with(|t| t.set(t.get() + 1));
        Self { _private: () }
    }

    pub fn active() -> bool {
        TRAINING.with(|t| t.get() > 0)
    }
}

impl Drop for TrainingGuard {
    fn drop(&mut self) {
        TRAINING.with(|t| t.set(t.get() - 1));
    }
}

/// Class labels of target images, readable only by evaluation code.
#[derive(Clone, Debug, PartialEq)]
pub struct SealedLabels {
    labels: Vec<ClassId>,
}

impl SealedLabels {
    pub fn new(labels: Vec<ClassId>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Panics when called while a [`TrainingGuard`] is alive on this thread.
    pub fn open(&self) -> &[ClassId] {
        assert!(
            !TrainingGuard::active(),
            "sealed evaluation labels accessed during training"
        );
        &self.labels
    }
}
