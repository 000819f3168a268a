use sunet::analysis::{LogEntry, SentenceLog};
use sunet::synthdata::{Laterality, Location, RegionStats};

/// Subject CS 4941, slices 1 to 21, columns w1..w10 as printed.
pub const CS4941: [[u32; 10]; 21] = [
    [657, 653, 6613, 4394, 4394, 4394, 4394, 4394, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6613, 4394, 4394, 4394, 4394, 4394, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
    [657, 653, 6531, 4394, 4394, 4394, 8436, 8436, 4394, 4394],
];

/// Tumor slices whose first symbols are the printed tumor expressions; the
/// second symbols all differ.
pub fn cs4941_log() -> (SentenceLog, Vec<String>) {
    let mut entries = Vec::new();
    let mut labels = Vec::new();
    for (i, ids) in CS4941.iter().enumerate() {
        entries.push(LogEntry {
            sample_id: "CS4941".into(),
            slice_index: i as u32 + 1,
            ids: ids.to_vec(),
            stats: RegionStats::absent(),
        });
        labels.push("normal".to_owned());
    }
    for (i, first) in [8584, 1168, 3912].iter().cycle().take(9).enumerate() {
        let mut ids = vec![*first, 100 + i as u32];
        ids.extend([4394; 8]);
        entries.push(LogEntry {
            sample_id: "TUMOR".into(),
            slice_index: i as u32,
            ids,
            stats: RegionStats {
                present: true,
                area: 30 + 5 * i,
                eccentricity: 0.5,
                laterality: Laterality::Left,
                location: Location::Upper,
                extra: Default::default(),
            },
        });
        labels.push("tumor".to_owned());
    }
    // Labels follow the log's sorted order: CS4941 sorts before TUMOR.
    (SentenceLog::new(entries).unwrap(), labels)
}

