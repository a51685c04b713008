//! UTC calendar components of integer timestamps.

use crate::journey::{Timestamp, SECONDS_PER_DAY};

/// Days since 1970-01-01 to `(year, month, day)` in the proleptic Gregorian
/// calendar.
pub fn civil_from_days(days: i64) -> (i64, u32, u32) {
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let month = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let year = yoe + era * 400 + i64::from(month <= 2);
    (year, month, day)
}

/// Monday = 0 .. Sunday = 6.
pub fn day_of_week(t: Timestamp) -> usize {
    // 1970-01-01 was a Thursday.
    (t.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as usize
}

/// Zero-based week of the month, `(day_of_month - 1) / 7`, in `0..5`.
pub fn week_of_month(t: Timestamp) -> usize {
    let (_, _, day) = civil_from_days(t.div_euclid(SECONDS_PER_DAY));
    ((day - 1) / 7) as usize
}

pub fn hour_of_day(t: Timestamp) -> usize {
    (t.rem_euclid(SECONDS_PER_DAY) / 3600) as usize
}

#[cfg(test)]
mod tests {
    use chrono::{Datelike, TimeZone, Timelike, Utc};

    use super::*;

    #[test]
    fn epoch_is_thursday_midnight() {
        assert_eq!(day_of_week(0), 3);
        assert_eq!(hour_of_day(0), 0);
        assert_eq!(week_of_month(0), 0);
    }

    #[test]
    fn matches_chrono_calendar() {
        let mut t: i64 = -5_000_000_000;
        while t < 5_000_000_000 {
            let dt = Utc.timestamp_opt(t, 0).unwrap();
            assert_eq!(day_of_week(t), dt.weekday().num_days_from_monday() as usize, "{t}");
            assert_eq!(hour_of_day(t), dt.hour() as usize);
            assert_eq!(week_of_month(t), ((dt.day() - 1) / 7) as usize);
            let (y, m, d) = civil_from_days(t.div_euclid(SECONDS_PER_DAY));
            assert_eq!((y, m, d), (i64::from(dt.year()), dt.month(), dt.day()));
            t += 7_777_777;
        }
    }
}
