//! Process layout: which process id plays which role.
//!
//! Process 0 is the root and process 1 the phonebook. Collectors follow,
//! level-major; the remainder is partitioned into equal-size groups of
//! one controller plus workers. Anything left over is idle reserve.

use thiserror::Error;

use super::message::{ProcessId, Role};

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error(
        "{total} processes are too few: need at least {minimum} \
         (root + phonebook + {collectors} collectors + {groups} groups of {group_size})"
    )]
    TooFewProcesses {
        total: usize,
        minimum: usize,
        collectors: usize,
        groups: usize,
        group_size: usize,
    },
    #[error("group size must be at least 1")]
    EmptyGroup,
    #[error("need at least one group")]
    NoGroups,
    #[error("groups_per_level sums to {got}, expected {expected} groups")]
    BadLevelDistribution { got: usize, expected: usize },
}

#[derive(Debug, Clone)]
pub struct LayoutConfig {
    pub levels: usize,
    pub groups: usize,
    /// Processes per group: one controller plus `group_size - 1` workers.
    pub group_size: usize,
    pub collectors_per_level: usize,
    /// Initial group count per level; must sum to `groups`.
    pub groups_per_level: Vec<usize>,
}

impl LayoutConfig {
    pub fn collectors(&self) -> usize {
        self.collectors_per_level * self.levels
    }

    pub fn minimum_processes(&self) -> usize {
        2 + self.collectors() + self.groups * self.group_size
    }

    /// Initial level of one group under the configured distribution.
    pub fn initial_level(&self, group: usize) -> usize {
        let mut remaining = group;
        for (level, &count) in self.groups_per_level.iter().enumerate() {
            if remaining < count {
                return level;
            }
            remaining -= count;
        }
        self.levels - 1
    }
}

/// Map every process id to a role. Extra processes beyond the layout's
/// need become idle reserve.
pub fn assign_roles(total: usize, config: &LayoutConfig) -> Result<Vec<Role>, LayoutError> {
    if config.group_size == 0 {
        return Err(LayoutError::EmptyGroup);
    }
    if config.groups == 0 {
        return Err(LayoutError::NoGroups);
    }
    let distributed: usize = config.groups_per_level.iter().sum();
    if config.groups_per_level.len() != config.levels || distributed != config.groups {
        return Err(LayoutError::BadLevelDistribution {
            got: distributed,
            expected: config.groups,
        });
    }
    let minimum = config.minimum_processes();
    if total < minimum {
        return Err(LayoutError::TooFewProcesses {
            total,
            minimum,
            collectors: config.collectors(),
            groups: config.groups,
            group_size: config.group_size,
        });
    }
    let mut roles = Vec::with_capacity(total);
    roles.push(Role::Root);
    roles.push(Role::Phonebook);
    for level in 0..config.levels {
        for shard in 0..config.collectors_per_level {
            roles.push(Role::Collector { level, shard });
        }
    }
    for group in 0..config.groups {
        roles.push(Role::Controller { group, level: config.initial_level(group) });
        for rank in 0..config.group_size - 1 {
            roles.push(Role::Worker { group, rank });
        }
    }
    while roles.len() < total {
        roles.push(Role::IdleReserve);
    }
    Ok(roles)
}

/// Process ids of one group's members, controller first.
pub fn group_members(config: &LayoutConfig, group: usize) -> Vec<ProcessId> {
    let base = 2 + config.collectors() + group * config.group_size;
    (base..base + config.group_size).collect()
}

/// Process id of one collector shard.
pub fn collector_pid(config: &LayoutConfig, level: usize, shard: usize) -> ProcessId {
    2 + level * config.collectors_per_level + shard
}

pub const ROOT: ProcessId = 0;
pub const PHONEBOOK: ProcessId = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_layout_is_root_phonebook_collector_controller() {
        let config = LayoutConfig {
            levels: 1,
            groups: 1,
            group_size: 1,
            collectors_per_level: 1,
            groups_per_level: vec![1],
        };
        let roles = assign_roles(4, &config).unwrap();
        assert_eq!(
            roles,
            vec![
                Role::Root,
                Role::Phonebook,
                Role::Collector { level: 0, shard: 0 },
                Role::Controller { group: 0, level: 0 },
            ]
        );
    }

    #[test]
    fn ten_process_layout_with_reserve() {
        // Two-level run, one collector per level, three groups of two:
        // 2 + 2 + 6 = 10 processes exactly; an 11th is idle reserve.
        let config = LayoutConfig {
            levels: 2,
            groups: 3,
            group_size: 2,
            collectors_per_level: 1,
            groups_per_level: vec![2, 1],
        };
        let roles = assign_roles(11, &config).unwrap();
        assert_eq!(roles.len(), 11);
        assert_eq!(roles[2], Role::Collector { level: 0, shard: 0 });
        assert_eq!(roles[3], Role::Collector { level: 1, shard: 0 });
        assert_eq!(roles[4], Role::Controller { group: 0, level: 0 });
        assert_eq!(roles[5], Role::Worker { group: 0, rank: 0 });
        assert_eq!(roles[6], Role::Controller { group: 1, level: 0 });
        assert_eq!(roles[8], Role::Controller { group: 2, level: 1 });
        assert_eq!(roles[10], Role::IdleReserve);
        assert_eq!(group_members(&config, 1), vec![6, 7]);
        assert_eq!(collector_pid(&config, 1, 0), 3);
    }

    #[test]
    fn too_few_processes_reports_the_minimum() {
        let config = LayoutConfig {
            levels: 2,
            groups: 2,
            group_size: 3,
            collectors_per_level: 1,
            groups_per_level: vec![1, 1],
        };
        match assign_roles(5, &config).unwrap_err() {
            LayoutError::TooFewProcesses { minimum, .. } => assert_eq!(minimum, 10),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn level_distribution_must_cover_all_groups() {
        let config = LayoutConfig {
            levels: 2,
            groups: 3,
            group_size: 1,
            collectors_per_level: 1,
            groups_per_level: vec![1, 1],
        };
        assert!(matches!(
            assign_roles(10, &config),
            Err(LayoutError::BadLevelDistribution { got: 2, expected: 3 })
        ));
    }
}
