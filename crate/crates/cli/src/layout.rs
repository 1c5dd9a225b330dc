use std::path::{Path, PathBuf};

/// Where each artifact lives inside the data directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn chunks(&self) -> PathBuf {
        self.root.join("chunks")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.txt")
    }

    pub fn series(&self) -> PathBuf {
        self.root.join("series")
    }

    pub fn quality(&self) -> PathBuf {
        self.root.join("quality.csv")
    }

    pub fn quality_summary(&self) -> PathBuf {
        self.root.join("quality_summary.csv")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }

    pub fn current_model(&self) -> PathBuf {
        self.root.join("models").join("current")
    }

    pub fn candidate_model(&self) -> PathBuf {
        self.root.join("models").join("candidate")
    }

    pub fn tune(&self) -> PathBuf {
        self.root.join("tune")
    }

    pub fn leaderboard(&self) -> PathBuf {
        self.root.join("leaderboard.csv")
    }

    pub fn importance(&self) -> PathBuf {
        self.root.join("importance.csv")
    }

    pub fn drift(&self) -> PathBuf {
        self.root.join("drift.csv")
    }

    pub fn backtest(&self) -> PathBuf {
        self.root.join("backtest")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn predictions(&self) -> PathBuf {
        self.logs().join("predictions.csv")
    }

    pub fn durations(&self) -> PathBuf {
        self.logs().join("durations.csv")
    }

    pub fn locks(&self) -> PathBuf {
        self.logs().join("locks")
    }
}
