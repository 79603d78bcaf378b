use serde::{Deserialize, Serialize};

use super::segments::CleaningConfig;
use super::series::MaskedSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutlierRule {
    Negative,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierFlag {
    pub index: usize,
    pub rule: OutlierRule,
}

/// Marks implausible values as missing.
///
/// Two rules apply, both evaluated on the incoming mask: negative values
/// (unless `allow_negative`) and runs of at least `max_constant_run`
/// identical consecutive present values. A missing value breaks a run. When
/// both rules match an index only `Negative` is reported.
pub fn remove_outliers(series: &MaskedSeries, config: &CleaningConfig) -> (MaskedSeries, Vec<OutlierFlag>) {
    let n = series.len();
    let mut rule_at: Vec<Option<OutlierRule>> = vec![None; n];

    if !config.allow_negative {
        for i in 0..n {
            if series.is_present(i) && series.values[i] < 0.0 {
                rule_at[i] = Some(OutlierRule::Negative);
            }
        }
    }

    let min_run = config.max_constant_run.max(2);
    let mut start = 0;
    while start < n {
        if !series.is_present(start) {
            start += 1;
            continue;
        }
        let mut end = start + 1;
        while end < n && series.is_present(end) && series.values[end] == series.values[start] {
            end += 1;
        }
        if end - start >= min_run {
            for slot in &mut rule_at[start..end] {
                slot.get_or_insert(OutlierRule::Constant);
            }
        }
        start = end;
    }

    let mut cleaned = series.clone();
    let mut report = Vec::new();
    for (index, rule) in rule_at.into_iter().enumerate() {
        if let Some(rule) = rule {
            cleaned.missing[index] = true;
            report.push(OutlierFlag { index, rule });
        }
    }
    (cleaned, report)
}
