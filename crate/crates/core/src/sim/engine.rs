//! Non-preemptive list scheduler over a task graph.
//!
//! Every task occupies one resource for a fixed number of cycles and may start
//! once all of its predecessors have finished. Each resource serves its ready
//! tasks in order of `(ready time, priority key, insertion order)`, so the
//! schedule is fully determined by the graph.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

pub(crate) type TaskId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct Priority(pub u64, pub u64);

#[derive(Debug, Clone)]
struct Task {
    resource: usize,
    duration: u64,
    priority: Priority,
    pending: usize,
    succs: Vec<TaskId>,
    start: u64,
    end: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct Scheduler {
    tasks: Vec<Task>,
    resources: usize,
    busy: Vec<u64>,
}

impl Scheduler {
    pub fn new(resources: usize) -> Self {
        Self {
            tasks: Vec::new(),
            resources,
            busy: vec![0; resources],
        }
    }

    pub fn add(&mut self, resource: usize, duration: u64, priority: Priority, deps: &[TaskId]) -> TaskId {
        debug_assert!(resource < self.resources);
        let id = self.tasks.len();
        for &d in deps {
            self.tasks[d].succs.push(id);
        }
        self.tasks.push(Task {
            resource,
            duration,
            priority,
            pending: deps.len(),
            succs: Vec::new(),
            start: 0,
            end: 0,
        });
        id
    }

    /// Schedules every task and returns the makespan.
    pub fn run(&mut self) -> u64 {
        let mut ready: Vec<BinaryHeap<Reverse<(u64, Priority, TaskId)>>> =
            (0..self.resources).map(|_| BinaryHeap::new()).collect();
        let mut occupied = vec![false; self.resources];
        let mut events: BinaryHeap<Reverse<(u64, TaskId)>> = BinaryHeap::new();
        for (id, t) in self.tasks.iter().enumerate() {
            if t.pending == 0 {
                ready[t.resource].push(Reverse((0, t.priority, id)));
            }
        }
        let mut now = 0;
        let mut finished = 0;
        let mut makespan = 0;
        loop {
            for r in 0..self.resources {
                if occupied[r] {
                    continue;
                }
                if let Some(Reverse((_, _, id))) = ready[r].pop() {
                    let t = &mut self.tasks[id];
                    t.start = now;
                    t.end = now + t.duration;
                    self.busy[r] += t.duration;
                    occupied[r] = true;
                    events.push(Reverse((t.end, id)));
                }
            }
            let Some(&Reverse((t, _))) = events.peek() else { break };
            now = t;
            while let Some(&Reverse((te, id))) = events.peek() {
                if te != now {
                    break;
                }
                events.pop();
                finished += 1;
                makespan = makespan.max(now);
                let res = self.tasks[id].resource;
                occupied[res] = false;
                for i in 0..self.tasks[id].succs.len() {
                    let s = self.tasks[id].succs[i];
                    let succ = &mut self.tasks[s];
                    succ.pending -= 1;
                    if succ.pending == 0 {
                        ready[succ.resource].push(Reverse((now, succ.priority, s)));
                    }
                }
            }
        }
        assert_eq!(finished, self.tasks.len(), "task graph has a cycle");
        makespan
    }

    pub fn busy(&self, resource: usize) -> u64 {
        self.busy[resource]
    }

    #[cfg(test)]
    pub fn end(&self, id: TaskId) -> u64 {
        self.tasks[id].end
    }

    #[cfg(test)]
    pub fn start(&self, id: TaskId) -> u64 {
        self.tasks[id].start
    }
}
