//! Trajectories, datasets, flattened histories and the dataset CSV format.
//!
//! CSV layout: header `traj_id,stage,x_0,...,x_{D-1},action,reward`, one row
//! per (trajectory, stage), stages 1-indexed. `D` is the widest stage; a
//! stage with fewer covariates leaves the trailing `x_` cells empty.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub covariates: Vec<f64>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub stages: Vec<StageRecord>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// Sum of the stage rewards.
    pub fn cumulative_reward(&self) -> f64 {
        self.stages.iter().map(|s| s.reward).sum()
    }

    /// Sum of the rewards strictly before `stage` (1-based).
    pub fn reward_prefix(&self, stage: usize) -> f64 {
        self.stages[..stage - 1].iter().map(|s| s.reward).sum()
    }

    /// Sum of the rewards from `stage` (1-based) to the end.
    pub fn reward_suffix(&self, stage: usize) -> f64 {
        self.stages[stage - 1..].iter().map(|s| s.reward).sum()
    }
}

pub fn cumulative_reward(trajectory: &Trajectory) -> f64 {
    trajectory.cumulative_reward()
}

/// Shape of a flattened history: covariate widths per stage and action count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryLayout {
    pub covariate_dims: Vec<usize>,
    pub num_actions: usize,
}

impl HistoryLayout {
    pub fn horizon(&self) -> usize {
        self.covariate_dims.len()
    }

    /// Length of the flattened `H_k` for 1-based `stage`.
    pub fn history_len(&self, stage: usize) -> usize {
        let past: usize = self.covariate_dims[..stage - 1]
            .iter()
            .map(|d| d + self.num_actions + 1)
            .sum();
        past + self.covariate_dims[stage - 1]
    }

    /// Offset of the covariate block `X_k` inside any history that contains it.
    pub fn covariate_offset(&self, stage: usize) -> usize {
        self.history_len(stage) - self.covariate_dims[stage - 1]
    }

    /// Offset of the reward `R_k` inside histories of later stages.
    pub fn reward_offset(&self, stage: usize) -> usize {
        self.history_len(stage) + self.num_actions
    }

    /// Observed `H_k` of a trajectory.
    pub fn prefix(&self, trajectory: &Trajectory, stage: usize) -> HistoryPrefix {
        let mut values = Vec::with_capacity(self.history_len(stage));
        for (k, rec) in trajectory.stages[..stage].iter().enumerate() {
            values.extend_from_slice(&rec.covariates);
            if k + 1 < stage {
                push_one_hot(&mut values, rec.action, self.num_actions);
                values.push(rec.reward);
            }
        }
        HistoryPrefix {
            stage,
            values,
            current_dim: self.covariate_dims[stage - 1],
            num_actions: self.num_actions,
        }
    }
}

pub(crate) fn push_one_hot(out: &mut Vec<f64>, action: usize, m: usize) {
    out.extend((0..m).map(|a| if a == action { 1.0 } else { 0.0 }));
}

/// Flattened `H_k = {X_1, A_1, R_1, ..., X_k}` with actions one-hot encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPrefix {
    stage: usize,
    values: Vec<f64>,
    current_dim: usize,
    num_actions: usize,
}

impl HistoryPrefix {
    /// Single-stage history holding only the baseline covariates.
    pub fn baseline(covariates: &[f64], num_actions: usize) -> Self {
        Self {
            stage: 1,
            values: covariates.to_vec(),
            current_dim: covariates.len(),
            num_actions,
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `X_k` of the current stage.
    pub fn current_covariates(&self) -> &[f64] {
        &self.values[self.values.len() - self.current_dim..]
    }

    /// Appends `(A_k, R_k, X_{k+1})`, producing `H_{k+1}`.
    pub fn extend(&self, action: usize, reward: f64, next_covariates: &[f64]) -> Self {
        let mut values =
            Vec::with_capacity(self.values.len() + self.num_actions + 1 + next_covariates.len());
        values.extend_from_slice(&self.values);
        push_one_hot(&mut values, action, self.num_actions);
        values.push(reward);
        values.extend_from_slice(next_covariates);
        Self {
            stage: self.stage + 1,
            values,
            current_dim: next_covariates.len(),
            num_actions: self.num_actions,
        }
    }

    /// History features followed by a one-hot action block.
    pub fn with_action(&self, action: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len() + self.num_actions);
        out.extend_from_slice(&self.values);
        push_one_hot(&mut out, action, self.num_actions);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    layout: HistoryLayout,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, num_actions: usize) -> Result<Self> {
        let first = trajectories.first().ok_or_else(|| {
            Error::InvalidData("dataset must contain at least one trajectory".into())
        })?;
        if first.stages.is_empty() {
            return Err(Error::InvalidData(
                "trajectories need at least one stage".into(),
            ));
        }
        if num_actions < 1 {
            return Err(Error::InvalidData("action space must be nonempty".into()));
        }
        let covariate_dims: Vec<usize> = first.stages.iter().map(|s| s.covariates.len()).collect();
        for t in &trajectories {
            if t.stages.len() != covariate_dims.len() {
                return Err(Error::InvalidData(format!(
                    "trajectory {} has {} stages, expected {}",
                    t.id,
                    t.stages.len(),
                    covariate_dims.len()
                )));
            }
            for (k, s) in t.stages.iter().enumerate() {
                if s.covariates.len() != covariate_dims[k] {
                    return Err(Error::InvalidData(format!(
                        "trajectory {} stage {} has {} covariates, expected {}",
                        t.id,
                        k + 1,
                        s.covariates.len(),
                        covariate_dims[k]
                    )));
                }
                if s.action >= num_actions {
                    return Err(Error::InvalidData(format!(
                        "trajectory {} stage {} action {} outside 0..{}",
                        t.id,
                        k + 1,
                        s.action,
                        num_actions
                    )));
                }
                if !s.reward.is_finite() || s.covariates.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidData(format!(
                        "trajectory {} stage {} has a non-finite value",
                        t.id,
                        k + 1
                    )));
                }
            }
        }
        Ok(Self {
            trajectories,
            layout: HistoryLayout {
                covariate_dims,
                num_actions,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.layout.horizon()
    }

    pub fn num_actions(&self) -> usize {
        self.layout.num_actions
    }

    pub fn covariate_dims(&self) -> &[usize] {
        &self.layout.covariate_dims
    }

    pub fn layout(&self) -> &HistoryLayout {
        &self.layout
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn trajectory(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn prefix(&self, i: usize, stage: usize) -> HistoryPrefix {
        self.layout.prefix(&self.trajectories[i], stage)
    }

    pub fn cumulative_rewards(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(Trajectory::cumulative_reward)
            .collect()
    }

    /// Reads the CSV format. `num_actions` defaults to `max(action) + 1`
    /// (at least 2) when not given.
    pub fn read_csv<R: Read>(reader: R, num_actions: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let missing = |name: &str| Error::Parse {
            row: 1,
            column: name.to_string(),
            message: "missing header column".into(),
        };
        let id_col = col("traj_id").ok_or_else(|| missing("traj_id"))?;
        let stage_col = col("stage").ok_or_else(|| missing("stage"))?;
        let action_col = col("action").ok_or_else(|| missing("action"))?;
        let reward_col = col("reward").ok_or_else(|| missing("reward"))?;
        let mut x_cols = Vec::new();
        while let Some(c) = col(&format!("x_{}", x_cols.len())) {
            x_cols.push(c);
        }

        let mut order: Vec<String> = Vec::new();
        let mut rows: BTreeMap<String, BTreeMap<usize, StageRecord>> = BTreeMap::new();
        for (idx, record) in rdr.records().enumerate() {
            // header is line 1
            let line = idx + 2;
            let record = record?;
            let field = |c: usize, name: &str| -> Result<&str> {
                record.get(c).map(str::trim).ok_or_else(|| Error::Parse {
                    row: line,
                    column: name.to_string(),
                    message: "missing field".into(),
                })
            };
            let parse_f = |c: usize, name: &str| -> Result<f64> {
                let raw = field(c, name)?;
                raw.parse::<f64>().map_err(|e| Error::Parse {
                    row: line,
                    column: name.to_string(),
                    message: format!("cannot parse {raw:?} as a number: {e}"),
                })
            };
            let id = field(id_col, "traj_id")?.to_string();
            let stage_raw = field(stage_col, "stage")?;
            let stage: usize = stage_raw.parse().map_err(|_| Error::Parse {
                row: line,
                column: "stage".into(),
                message: format!("stage {stage_raw:?} is not a positive integer"),
            })?;
            if stage == 0 {
                return Err(Error::Parse {
                    row: line,
                    column: "stage".into(),
                    message: "stages are 1-indexed".into(),
                });
            }
            let action_raw = field(action_col, "action")?;
            let action: usize = action_raw.parse().map_err(|_| Error::Parse {
                row: line,
                column: "action".into(),
                message: format!("action {action_raw:?} is not a nonnegative integer"),
            })?;
            let reward = parse_f(reward_col, "reward")?;
            let mut covariates = Vec::new();
            let mut seen_blank = false;
            for (j, &c) in x_cols.iter().enumerate() {
                let name = format!("x_{j}");
                let raw = field(c, &name)?;
                if raw.is_empty() {
                    seen_blank = true;
                    continue;
                }
                if seen_blank {
                    return Err(Error::Parse {
                        row: line,
                        column: name,
                        message: "covariate after an empty cell".into(),
                    });
                }
                covariates.push(parse_f(c, &name)?);
            }
            let entry = rows.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                BTreeMap::new()
            });
            if entry
                .insert(
                    stage,
                    StageRecord {
                        covariates,
                        action,
                        reward,
                    },
                )
                .is_some()
            {
                return Err(Error::Parse {
                    row: line,
                    column: "stage".into(),
                    message: format!("duplicate stage {stage} for trajectory {id}"),
                });
            }
        }

        let mut trajectories = Vec::with_capacity(order.len());
        for id in order {
            let stages = rows.remove(&id).unwrap_or_default();
            let expected: Vec<usize> = (1..=stages.len()).collect();
            if stages.keys().copied().collect::<Vec<_>>() != expected {
                return Err(Error::InvalidData(format!(
                    "trajectory {id} does not have contiguous stages starting at 1"
                )));
            }
            trajectories.push(Trajectory {
                id,
                stages: stages.into_values().collect(),
            });
        }
        let m = match num_actions {
            Some(m) => m,
            None => trajectories
                .iter()
                .flat_map(|t| t.stages.iter().map(|s| s.action + 1))
                .max()
                .unwrap_or(2)
                .max(2),
        };
        Self::new(trajectories, m)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let width = self
            .layout
            .covariate_dims
            .iter()
            .copied()
            .max()
            .unwrap_or(0);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["traj_id".to_string(), "stage".to_string()];
        header.extend((0..width).map(|j| format!("x_{j}")));
        header.push("action".into());
        header.push("reward".into());
        w.write_record(&header)?;
        for t in &self.trajectories {
            for (k, s) in t.stages.iter().enumerate() {
                let mut row = vec![t.id.clone(), (k + 1).to_string()];
                for j in 0..width {
                    row.push(
                        s.covariates
                            .get(j)
                            .map(|x| format!("{x}"))
                            .unwrap_or_default(),
                    );
                }
                row.push(s.action.to_string());
                row.push(format!("{}", s.reward));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Subset of trajectories, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices
                .iter()
                .map(|&i| self.trajectories[i].clone())
                .collect(),
            self.layout.num_actions,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_stage() -> Trajectory {
        Trajectory {
            id: "a".into(),
            stages: vec![
                StageRecord {
                    covariates: vec![0.5, -1.0],
                    action: 1,
                    reward: 1.0,
                },
                StageRecord {
                    covariates: vec![2.0],
                    action: 0,
                    reward: 2.0,
                },
            ],
        }
    }

    #[test]
    fn cumulative_reward_examples() {
        assert_eq!(two_stage().cumulative_reward(), 3.0);
        let single = Trajectory {
            id: "s".into(),
            stages: vec![StageRecord {
                covariates: vec![0.0],
                action: 0,
                reward: 5.5,
            }],
        };
        assert_eq!(cumulative_reward(&single), 5.5);
        let mut t = two_stage();
        t.stages[0].reward = -1.0;
        t.stages[1].reward = 1.0;
        assert_eq!(t.cumulative_reward(), 0.0);
    }

    #[test]
    fn history_prefix_layout() {
        let ds = Dataset::new(vec![two_stage()], 2).unwrap();
        let h1 = ds.prefix(0, 1);
        assert_eq!(h1.values(), &[0.5, -1.0]);
        let h2 = ds.prefix(0, 2);
        // X1 (2), onehot A1 (2), R1, X2 (1)
        assert_eq!(h2.values(), &[0.5, -1.0, 0.0, 1.0, 1.0, 2.0]);
        assert_eq!(h2.current_covariates(), &[2.0]);
        assert_eq!(ds.layout().history_len(2), 6);
        assert_eq!(ds.layout().reward_offset(1), 4);
        assert_eq!(ds.layout().covariate_offset(2), 5);
        assert_eq!(h1.extend(1, 1.0, &[2.0]), h2);
        assert_eq!(
            h2.with_action(0),
            vec![0.5, -1.0, 0.0, 1.0, 1.0, 2.0, 1.0, 0.0]
        );
    }

    #[test]
    fn rejects_inconsistent_trajectories() {
        let mut bad = two_stage();
        bad.stages.pop();
        assert!(Dataset::new(vec![two_stage(), bad], 2).is_err());
        let mut bad_action = two_stage();
        bad_action.stages[0].action = 2;
        assert!(Dataset::new(vec![bad_action], 2).is_err());
        assert!(Dataset::new(vec![], 2).is_err());
    }

    #[test]
    fn csv_round_trip_with_ragged_covariates() {
        let ds = Dataset::new(
            vec![
                two_stage(),
                Trajectory {
                    id: "b".into(),
                    ..two_stage()
                },
            ],
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("traj_id,stage,x_0,x_1,action,reward\n"));
        let back = Dataset::read_csv(buf.as_slice(), Some(2)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_errors_carry_position() {
        let text = "traj_id,stage,x_0,action,reward\na,1,0.5,1,1.0\nb,1,oops,0,2.0\n";
        match Dataset::read_csv(text.as_bytes(), None) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "x_0");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = "traj_id,stage,x_0,reward\na,1,0.5,1.0\n";
        assert!(matches!(
            Dataset::read_csv(missing.as_bytes(), None),
            Err(Error::Parse { column, .. }) if column == "action"
        ));
    }
}
