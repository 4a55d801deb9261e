use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::AlgoError;
use crate::federation::DecomposedQuery;
use crate::mgql::print_query;
use crate::model::SiteId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    New,
    Dispatched,
    Running,
    Completed,
    Partial,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Completed | JobState::Partial | JobState::Failed
        )
    }

    pub fn can_become(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (New, Dispatched) | (Dispatched, Running) | (Running, Completed | Partial | Failed)
        )
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Pending,
    Running,
    Done,
    Failed,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed)
    }

    pub fn can_become(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Pending, Running | Done | Failed) | (Running, Done | Failed)
        )
    }
}

/// One site's share of a job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub site: SiteId,
    pub state: TaskState,
    /// Canonical text of the selector as routed to this site.
    pub selector: String,
    pub images_selected: u64,
    pub derived_written: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub algo_id: String,
    pub selector: String,
    pub state: JobState,
    pub tasks: Vec<TaskRecord>,
    /// Milliseconds since the Unix epoch.
    pub created_at: i64,
    pub finished_at: Option<i64>,
    pub error: Option<String>,
}

impl JobRecord {
    fn step(&mut self, to: JobState) -> Result<(), AlgoError> {
        if !self.state.can_become(to) {
            return Err(AlgoError::IllegalTransition {
                from: self.state.to_string(),
                to: to.to_string(),
            });
        }
        self.state = to;
        Ok(())
    }

    pub fn derived_written(&self) -> u64 {
        self.tasks.iter().map(|t| t.derived_written).sum()
    }
}

/// A task outcome as reported by the site that ran it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub job_id: String,
    pub site: SiteId,
    pub state: TaskState,
    pub images_selected: u64,
    pub derived_written: u64,
    pub error: Option<String>,
}

/// A sortable unique id: 48-bit millisecond timestamp then 80 random bits,
/// Crockford base32.
pub fn new_job_id(now_ms: i64, rng: &mut impl RngCore) -> String {
    let mut r = [0u8; 16];
    rng.fill_bytes(&mut r[6..]);
    let random = u128::from_be_bytes(r);
    ulid::Ulid::from_parts(now_ms.max(0) as u64 & 0xFFFF_FFFF_FFFF, random).to_string()
}

/// Creates a job with one task per routed site and dispatches it.
///
/// A plan that routes nowhere yields a job that has already failed.
pub fn schedule_job(
    job_id: String,
    algo_id: &str,
    selector: &str,
    plan: &DecomposedQuery,
    self_site: &SiteId,
    now_ms: i64,
) -> JobRecord {
    let mut routed: Vec<(SiteId, String)> = plan
        .remote
        .iter()
        .map(|(s, q)| (s.clone(), print_query(q)))
        .collect();
    if let Some(l) = &plan.local {
        routed.push((self_site.clone(), print_query(l)));
    }
    routed.sort();
    let mut job = JobRecord {
        job_id,
        algo_id: algo_id.to_string(),
        selector: selector.to_string(),
        state: JobState::New,
        tasks: routed
            .into_iter()
            .map(|(site, selector)| TaskRecord {
                site,
                state: TaskState::Pending,
                selector,
                images_selected: 0,
                derived_written: 0,
                error: None,
            })
            .collect(),
        created_at: now_ms,
        finished_at: None,
        error: None,
    };
    job.step(JobState::Dispatched)
        .expect("fresh job dispatches");
    if job.tasks.is_empty() {
        job.step(JobState::Running).expect("dispatched job runs");
        job.step(JobState::Failed).expect("running job fails");
        job.error = Some("no sites".into());
        job.finished_at = Some(now_ms);
    }
    job
}

/// Applies one task outcome and settles the job once every task is terminal.
pub fn advance_job(job: &JobRecord, r: &TaskResult, now_ms: i64) -> Result<JobRecord, AlgoError> {
    let mut job = job.clone();
    if r.job_id != job.job_id {
        return Err(AlgoError::UnknownTask(format!(
            "{} is not part of job {}",
            r.site, job.job_id
        )));
    }
    if job.state.is_terminal() {
        return Err(AlgoError::IllegalTransition {
            from: job.state.to_string(),
            to: job.state.to_string(),
        });
    }
    let task = job
        .tasks
        .iter_mut()
        .find(|t| t.site == r.site)
        .ok_or_else(|| AlgoError::UnknownTask(r.site.to_string()))?;
    if !task.state.can_become(r.state) {
        return Err(AlgoError::IllegalTransition {
            from: format!("{:?}", task.state),
            to: format!("{:?}", r.state),
        });
    }
    if r.derived_written > r.images_selected
        || (r.state == TaskState::Done && r.derived_written != r.images_selected)
    {
        return Err(AlgoError::BadParams(format!(
            "task {} reports {} of {} images",
            r.site, r.derived_written, r.images_selected
        )));
    }
    task.state = r.state;
    task.images_selected = r.images_selected;
    task.derived_written = r.derived_written;
    task.error = r.error.clone();
    if job.state == JobState::Dispatched {
        job.step(JobState::Running)?;
    }
    if job.tasks.iter().all(|t| t.state.is_terminal()) {
        let settled = if job.tasks.iter().all(|t| t.state == TaskState::Done) {
            JobState::Completed
        } else if job.tasks.iter().all(|t| t.state == TaskState::Failed) {
            JobState::Failed
        } else {
            JobState::Partial
        };
        job.step(settled)?;
        job.finished_at = Some(now_ms);
    }
    Ok(job)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, VecDeque};

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mgql::{parse_query, QueryAst};

    fn sid(s: &str) -> SiteId {
        SiteId::new(s).unwrap()
    }

    fn plan(sites: &[&str]) -> DecomposedQuery {
        let q = parse_query("SELECT images WHERE patient.sex = 'F'").unwrap();
        DecomposedQuery {
            local: None,
            remote: sites.iter().map(|s| (sid(s), q.clone())).collect(),
        }
    }

    fn result(job: &JobRecord, site: &str, state: TaskState) -> TaskResult {
        let n = if state == TaskState::Done { 4 } else { 0 };
        TaskResult {
            job_id: job.job_id.clone(),
            site: sid(site),
            state,
            images_selected: 4,
            derived_written: n,
            error: None,
        }
    }

    #[test]
    fn ids_sort_by_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = new_job_id(1_000, &mut rng);
        let b = new_job_id(2_000, &mut rng);
        assert_eq!(a.len(), 26);
        assert!(a < b);
        assert_ne!(new_job_id(1_000, &mut rng), a);
    }

    #[test]
    fn scheduling() {
        let job = schedule_job(
            "j".into(),
            "density-v1",
            "SELECT images",
            &plan(&["a", "b"]),
            &sid("a"),
            5,
        );
        assert_eq!(job.state, JobState::Dispatched);
        assert_eq!(job.tasks.len(), 2);
        assert_eq!(
            job.tasks[0].selector,
            "SELECT images WHERE patient.sex = 'F'"
        );

        let local = DecomposedQuery {
            local: Some(QueryAst::select(crate::mgql::Target::Images, None)),
            remote: vec![],
        };
        let job = schedule_job(
            "j".into(),
            "density-v1",
            "SELECT images WHERE site.id = 'a'",
            &local,
            &sid("a"),
            5,
        );
        assert_eq!(job.tasks.len(), 1);
        assert_eq!(job.tasks[0].selector, "SELECT images");

        let none = DecomposedQuery {
            local: None,
            remote: vec![],
        };
        let job = schedule_job(
            "j".into(),
            "density-v1",
            "SELECT images",
            &none,
            &sid("a"),
            5,
        );
        assert_eq!(job.state, JobState::Failed);
        assert_eq!(job.error.as_deref(), Some("no sites"));
    }

    #[test]
    fn terminal_classification() {
        let job = schedule_job("j".into(), "d-v1", "q", &plan(&["a", "b"]), &sid("a"), 0);
        let j = advance_job(&job, &result(&job, "a", TaskState::Done), 1).unwrap();
        assert_eq!(j.state, JobState::Running);
        let done = advance_job(&j, &result(&job, "b", TaskState::Done), 2).unwrap();
        assert_eq!(
            (done.state, done.finished_at, done.derived_written()),
            (JobState::Completed, Some(2), 8)
        );
        let partial = advance_job(&j, &result(&job, "b", TaskState::Failed), 2).unwrap();
        assert_eq!(partial.state, JobState::Partial);
        assert!(advance_job(&done, &result(&job, "b", TaskState::Done), 3).is_err());
        assert!(advance_job(&job, &result(&job, "z", TaskState::Done), 3).is_err());
        let mut lying = result(&job, "a", TaskState::Done);
        lying.derived_written = 3;
        assert!(advance_job(&job, &lying, 3).is_err());
    }

    /// Walks every interleaving of task reports for up to three tasks.
    #[test]
    fn exhaustive_state_machine() {
        use TaskState::*;
        let mut reachable = BTreeSet::new();
        for n in 0..=3usize {
            let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let start = schedule_job("j".into(), "d-v1", "q", &plan(&refs), &sid("s0"), 0);
            let mut queue = VecDeque::from([start]);
            let mut seen = BTreeSet::new();
            while let Some(job) = queue.pop_front() {
                let key = (
                    job.state,
                    job.tasks.iter().map(|t| t.state).collect::<Vec<_>>(),
                );
                if !seen.insert(key.clone()) {
                    continue;
                }
                reachable.insert(key.clone());
                let all_terminal = job.tasks.iter().all(|t| t.state.is_terminal());
                assert_eq!(
                    job.state.is_terminal(),
                    all_terminal || job.tasks.is_empty(),
                    "{key:?}"
                );
                if job.state.is_terminal() {
                    let want =
                        if job.tasks.is_empty() || job.tasks.iter().all(|t| t.state == Failed) {
                            JobState::Failed
                        } else if job.tasks.iter().all(|t| t.state == Done) {
                            JobState::Completed
                        } else {
                            JobState::Partial
                        };
                    assert_eq!(job.state, want, "{key:?}");
                } else {
                    assert!(matches!(
                        job.state,
                        JobState::Dispatched | JobState::Running
                    ));
                    assert_eq!(
                        job.state == JobState::Running,
                        job.tasks.iter().any(|t| t.state != Pending)
                    );
                }
                for t in &job.tasks {
                    for to in [Pending, Running, Done, Failed] {
                        let r = result(&job, t.site.as_str(), to);
                        match advance_job(&job, &r, 1) {
                            Ok(next) => {
                                assert!(t.state.can_become(to));
                                let via_running = job.state.can_become(JobState::Running)
                                    && JobState::Running.can_become(next.state);
                                assert!(
                                    next.state == job.state
                                        || job.state.can_become(next.state)
                                        || via_running
                                );
                                queue.push_back(next);
                            }
                            Err(_) => assert!(!t.state.can_become(to) || job.state.is_terminal()),
                        }
                    }
                }
            }
        }
        // 0 tasks: 1 state; 1 task: dispatched, running, done, failed; ...
        let count = |n: usize| reachable.iter().filter(|(_, t)| t.len() == n).count();
        assert_eq!((count(0), count(1)), (1, 4));
        assert_eq!(count(2), 16);
        assert_eq!(count(3), 64);
    }
}
