use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};

use super::{WarehouseConfig, WarehouseError};

pub(crate) const CATEGORIES: [&str; 6] = ["Fresh", "Snacks", "Beverage", "Pharmacy", "Flowers", "Household"];
pub(crate) const CITIES: [&str; 3] = ["Hangzhou", "Shanghai", "Beijing"];
const DISTRICTS: [[&str; 3]; 3] = [
    ["Xihu", "Binjiang", "Gongshu"],
    ["Jingan", "Xuhui", "Pudong"],
    ["Chaoyang", "Haidian", "Dongcheng"],
];
const TIERS: [(&str, f64); 3] = [("KA", 0.2), ("Chain", 0.35), ("Local", 0.45)];
const GENDERS: [(&str, f64); 2] = [("Female", 0.55), ("Male", 0.45)];
const AGE_BANDS: [(&str, f64); 4] = [("GenZ", 0.3), ("Millennial", 0.4), ("GenX", 0.2), ("Senior", 0.1)];
const LEVELS: [(&str, f64); 3] = [("new", 0.35), ("regular", 0.45), ("vip", 0.2)];
const CHANNELS: [(&str, f64); 3] = [("app", 0.6), ("miniprogram", 0.3), ("web", 0.1)];
const DELIVERY: [(&str, f64); 2] = [("express", 0.4), ("standard", 0.6)];
const SOURCES: [(&str, f64); 4] = [("search", 0.35), ("feed", 0.3), ("push", 0.15), ("direct", 0.2)];
const RATINGS: [(i64, f64); 5] = [(1, 0.05), (2, 0.07), (3, 0.13), (4, 0.3), (5, 0.45)];

const SHOP_ADJ: [&str; 12] = [
    "Green", "Sunny", "Golden", "Fresh", "Happy", "Urban", "Lucky", "Silver", "Maple", "Harbor", "Bright", "Jade",
];
const SHOP_NOUN: [&str; 12] = [
    "Basket", "Grocer", "Market", "Pantry", "Corner", "Depot", "Larder", "Bazaar", "Cellar", "Garden", "Stall", "Kitchen",
];
const BRAND_NAMES: [&str; 12] = [
    "Aurora", "Bamboo", "Cypress", "Delta", "Ember", "Fjord", "Gala", "Helix", "Iris", "Juniper", "Kestrel", "Lotus",
];

// Stream tags for the counter-based generator.
const TAG_SHOP: u64 = 1;
const TAG_USER: u64 = 2;
const TAG_TRD: u64 = 3;
const TAG_LOG: u64 = 4;
pub(crate) const TAG_SCENARIO: u64 = 5;

#[derive(Debug, Clone)]
pub(crate) struct Shop {
    pub id: String,
    pub name: String,
    pub brand_id: String,
    pub brand_name: String,
    pub category: &'static str,
    pub district: &'static str,
    pub city: &'static str,
    pub tier: &'static str,
    pub mult: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct User {
    pub id: String,
    pub gender: &'static str,
    pub age_band: &'static str,
    pub level: &'static str,
    pub city: &'static str,
}

#[derive(Debug, Clone)]
pub(crate) struct TrdRow {
    pub order_id: String,
    pub day: usize,
    pub user: usize,
    pub shop: usize,
    pub order_channel: &'static str,
    pub delivery_type: &'static str,
    pub net_gmv: f64,
    pub gross_gmv: f64,
    pub discount_amt: f64,
    pub subsidy_amt: f64,
    pub item_qty: i64,
    pub is_refund: i64,
    pub refund_amt: f64,
    pub delivery_minutes: f64,
    pub is_late: i64,
    pub coupon_used: i64,
    pub has_review: i64,
    pub rating: i64,
    pub is_bad_review: i64,
    pub is_cancel: i64,
}

#[derive(Debug, Clone)]
pub(crate) struct LogRow {
    pub day: usize,
    pub user: usize,
    pub shop: usize,
    pub traffic_source: &'static str,
    pub expose_cnt: i64,
    pub click_cnt: i64,
    pub cart_cnt: i64,
    pub pay_cnt: i64,
    pub search_cnt: i64,
    pub stay_seconds: i64,
}

#[derive(Debug, Clone)]
pub(crate) struct WarehouseData {
    pub dates: Vec<NaiveDate>,
    pub shops: Vec<Shop>,
    pub users: Vec<User>,
    pub trd: Vec<TrdRow>,
    pub log: Vec<LogRow>,
}

impl WarehouseData {
    pub fn ds(&self, day: usize) -> String {
        super::format_ds(self.dates[day])
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(tag, a, b)` cell, so that any cell's
/// draws do not depend on how many draws other cells consumed.
pub(crate) fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed ^ tag.rotate_left(48)) ^ a) ^ b.rotate_left(17));
    ChaCha8Rng::seed_from_u64(key)
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, table: &[(T, f64)]) -> T {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(v, w) in table {
        if u < w {
            return v;
        }
        u -= w;
    }
    table[table.len() - 1].0
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn letters(mut n: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'A' + (n % 26) as u8);
        n /= 26;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

fn shop_name(i: usize) -> String {
    let base = format!("{} {}", SHOP_ADJ[i % 12], SHOP_NOUN[(i / 12) % 12]);
    if i < 144 {
        base
    } else {
        format!("{base} {}", letters(i / 144 - 1))
    }
}

fn brand_name(i: usize) -> String {
    if i < BRAND_NAMES.len() {
        BRAND_NAMES[i].to_string()
    } else {
        format!("{} {}", BRAND_NAMES[i % BRAND_NAMES.len()], letters(i / BRAND_NAMES.len() - 1))
    }
}

pub(crate) fn is_holiday(date: NaiveDate) -> bool {
    matches!(
        (date.month(), date.day()),
        (1, 1) | (5, 1..=5) | (10, 1..=7) | (12, 25)
    )
}

pub(crate) fn is_weekend(date: NaiveDate) -> bool {
    matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

pub(crate) fn generate_base(config: &WarehouseConfig) -> Result<WarehouseData, WarehouseError> {
    let (first, _) = config.date_range()?;
    let dates: Vec<NaiveDate> = (0..config.n_days)
        .map(|d| first + chrono::Days::new(u64::from(d)))
        .collect();
    let seed = config.seed;
    let rates = &config.base_rates;

    let shops: Vec<Shop> = (0..config.n_shops as usize)
        .map(|i| {
            let mut rng = stream_rng(seed, TAG_SHOP, i as u64, 0);
            let brand = rng.random_range(0..config.n_brands as usize);
            let city_idx = rng.random_range(0..CITIES.len());
            let district = DISTRICTS[city_idx][rng.random_range(0..3)];
            let category = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
            let tier = pick(&mut rng, &TIERS);
            let mult = LogNormal::new(0.0, 0.35).expect("lognormal").sample(&mut rng);
            Shop {
                id: format!("S{:03}", i + 1),
                name: shop_name(i),
                brand_id: format!("B{:02}", brand + 1),
                brand_name: brand_name(brand),
                category,
                district,
                city: CITIES[city_idx],
                tier,
                mult,
            }
        })
        .collect();

    let users: Vec<User> = (0..config.n_users as usize)
        .map(|i| {
            let mut rng = stream_rng(seed, TAG_USER, i as u64, 0);
            User {
                id: format!("U{:06}", i + 1),
                gender: pick(&mut rng, &GENDERS),
                age_band: pick(&mut rng, &AGE_BANDS),
                level: pick(&mut rng, &LEVELS),
                city: CITIES[rng.random_range(0..CITIES.len())],
            }
        })
        .collect();

    let basket_sigma = 0.45f64;
    let mut trd = Vec::new();
    let mut log = Vec::new();
    let mut order_seq = 0usize;
    for (s_idx, shop) in shops.iter().enumerate() {
        for (d_idx, &date) in dates.iter().enumerate() {
            let mut lift = shop.mult;
            if is_weekend(date) {
                lift *= rates.weekend_lift;
            }
            if is_holiday(date) {
                lift *= rates.holiday_lift;
            }
            let mut rng = stream_rng(seed, TAG_TRD, s_idx as u64, d_idx as u64);
            let n_orders = Poisson::new(rates.orders_per_shop_day * lift)
                .map(|p| p.sample(&mut rng) as usize)
                .unwrap_or(0);
            for _ in 0..n_orders {
                order_seq += 1;
                let user = rng.random_range(0..users.len());
                let level_factor = match users[user].level {
                    "vip" => 1.5,
                    "new" => 0.8,
                    _ => 1.0,
                };
                let mean = rates.mean_basket * level_factor;
                let mu = mean.ln() - basket_sigma * basket_sigma / 2.0;
                let gross = round2(LogNormal::new(mu, basket_sigma).expect("lognormal").sample(&mut rng).max(1.0));
                let coupon_used = i64::from(rng.random::<f64>() < rates.coupon_prob);
                let discount_frac = if coupon_used == 1 {
                    rng.random_range(0.05..0.2)
                } else {
                    rng.random_range(0.0..0.05)
                };
                let discount = round2(gross * discount_frac);
                let subsidy = round2(discount * rng.random_range(0.0..0.5));
                let net = round2(gross - discount);
                let item_qty = 1 + Poisson::new(1.5).expect("poisson").sample(&mut rng) as i64;
                let order_channel = pick(&mut rng, &CHANNELS);
                let delivery_type = pick(&mut rng, &DELIVERY);
                let (dmean, dsd, late_at) = if delivery_type == "express" {
                    (28.0, 6.0, 38.0)
                } else {
                    (45.0, 10.0, 60.0)
                };
                let minutes = Normal::<f64>::new(dmean, dsd).expect("normal").sample(&mut rng).max(8.0);
                let minutes = (minutes * 10.0).round() / 10.0;
                let is_refund = i64::from(rng.random::<f64>() < rates.refund_prob);
                let refund_amt = if is_refund == 1 {
                    round2(net * rng.random_range(0.3..1.0))
                } else {
                    0.0
                };
                let is_cancel = i64::from(rng.random::<f64>() < rates.cancel_prob);
                let has_review = i64::from(rng.random::<f64>() < rates.review_prob);
                let rating = if has_review == 1 { pick(&mut rng, &RATINGS) } else { 0 };
                trd.push(TrdRow {
                    order_id: format!("O{order_seq:08}"),
                    day: d_idx,
                    user,
                    shop: s_idx,
                    order_channel,
                    delivery_type,
                    net_gmv: net,
                    gross_gmv: gross,
                    discount_amt: discount,
                    subsidy_amt: subsidy,
                    item_qty,
                    is_refund,
                    refund_amt,
                    delivery_minutes: minutes,
                    is_late: i64::from(minutes > late_at),
                    coupon_used,
                    has_review,
                    rating,
                    is_bad_review: i64::from(has_review == 1 && rating <= 2),
                    is_cancel,
                });
            }

            let mut rng = stream_rng(seed, TAG_LOG, s_idx as u64, d_idx as u64);
            let n_sessions = Poisson::new(rates.orders_per_shop_day * rates.sessions_per_order * lift)
                .map(|p| p.sample(&mut rng) as usize)
                .unwrap_or(0);
            for _ in 0..n_sessions {
                let user = rng.random_range(0..users.len());
                let source = pick(&mut rng, &SOURCES);
                let expose_cnt = 1 + Poisson::new(4.0).expect("poisson").sample(&mut rng) as i64;
                let click_cnt = (0..expose_cnt).filter(|_| rng.random::<f64>() < 0.3).count() as i64;
                let cart_cnt = i64::from(click_cnt > 0 && rng.random::<f64>() < 0.45);
                let pay_cnt = i64::from(cart_cnt > 0 && rng.random::<f64>() < 0.6);
                let search_cnt = if source == "search" {
                    1 + Poisson::new(1.0).expect("poisson").sample(&mut rng) as i64
                } else {
                    i64::from(rng.random::<f64>() < 0.15)
                };
                let stay = LogNormal::<f64>::new(3.6, 0.6).expect("lognormal").sample(&mut rng).round() as i64;
                log.push(LogRow {
                    day: d_idx,
                    user,
                    shop: s_idx,
                    traffic_source: source,
                    expose_cnt,
                    click_cnt,
                    cart_cnt,
                    pay_cnt,
                    search_cnt,
                    stay_seconds: stay.max(1),
                });
            }
        }
    }

    Ok(WarehouseData {
        dates,
        shops,
        users,
        trd,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_rng_is_cell_independent() {
        let a: u64 = stream_rng(7, TAG_TRD, 3, 4).random();
        let b: u64 = stream_rng(7, TAG_TRD, 3, 4).random();
        let c: u64 = stream_rng(7, TAG_TRD, 4, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn names_are_unique_and_digit_free() {
        let names: std::collections::BTreeSet<_> = (0..400).map(shop_name).collect();
        assert_eq!(names.len(), 400);
        assert!(names.iter().all(|n| !n.chars().any(|c| c.is_ascii_digit())));
        assert!((0..40).map(brand_name).all(|n| !n.chars().any(|c| c.is_ascii_digit())));
    }

    #[test]
    fn holiday_calendar() {
        let d = |s| super::super::parse_ds(s).unwrap();
        assert!(is_holiday(d("20251003")));
        assert!(!is_holiday(d("20251008")));
        assert!(is_weekend(d("20251011")));
        assert!(!is_weekend(d("20251010")));
    }
}
