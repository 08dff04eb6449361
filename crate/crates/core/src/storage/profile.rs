use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bandwidth math uses decimal megabytes so charges are reproducible to the bit.
pub const BYTES_PER_MB: f64 = 1e6;

/// Timing and limits of one communication channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelProfile {
    pub name: String,
    pub bandwidth_mbps: f64,
    pub latency_s: f64,
    /// Time to bring the service up before a job can use it.
    #[serde(default)]
    pub startup_s: f64,
    #[serde(default)]
    pub max_item_bytes: Option<usize>,
    #[serde(default)]
    pub hourly_price_usd: f64,
    /// Set when latency/bandwidth are borrowed from another service rather than measured.
    #[serde(default)]
    pub estimated: bool,
}

impl ChannelProfile {
    pub fn new(name: &str, bandwidth_mbps: f64, latency_s: f64) -> Self {
        ChannelProfile {
            name: name.to_string(),
            bandwidth_mbps,
            latency_s,
            startup_s: 0.0,
            max_item_bytes: None,
            hourly_price_usd: 0.0,
            estimated: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_mbps > 0.0 && self.bandwidth_mbps.is_finite()) {
            return Err(Error::invalid(format!("channel {}: bandwidth must be > 0", self.name)));
        }
        if !(self.latency_s >= 0.0 && self.startup_s >= 0.0 && self.hourly_price_usd >= 0.0) {
            return Err(Error::invalid(format!(
                "channel {}: latency, startup and price must be >= 0",
                self.name
            )));
        }
        Ok(())
    }

    /// Seconds charged for moving `bytes` in one request: `latency + bytes / bandwidth`.
    pub fn transfer_s(&self, bytes: usize) -> f64 {
        self.latency_s + bytes as f64 / (self.bandwidth_mbps * BYTES_PER_MB)
    }
}

/// Built-in channel personas.
///
/// Bandwidth and latency come from measured AWS constants: S3 65 MB/s and 80 ms;
/// ElastiCache cache.t3.medium 630 MB/s and 10 ms; cache.m5.large 1260 MB/s; gp2 EBS
/// 1950 MB/s and 30 us; t2.medium network 120 MB/s and 0.5 ms; c5.large network
/// 225 MB/s and 0.15 ms. DynamoDB caps items at 400 KB; its latency and bandwidth are
/// unmeasured and borrowed from S3 (`estimated = true`). Memcached-backed ElastiCache
/// takes about two minutes to start. `ps_hybrid` is the Lambda-to-VM parameter-server
/// link: 75 MB in 1.85 s including serialization.
///
/// Hourly prices are on-demand list prices (the Memcached node is priced as the
/// cache.t3.small used alongside the measurements), not measurements; override them in
/// config.
pub fn builtin_profiles() -> Vec<ChannelProfile> {
    let mut s3 = ChannelProfile::new("s3", 65.0, 8e-2);
    s3.startup_s = 0.0;

    let mut ec_t3 = ChannelProfile::new("elasticache_t3", 630.0, 1e-2);
    ec_t3.startup_s = 120.0;
    ec_t3.hourly_price_usd = 0.034;

    let mut ec_m5 = ChannelProfile::new("elasticache_m5", 1260.0, 1e-2);
    ec_m5.startup_s = 120.0;
    ec_m5.hourly_price_usd = 0.156;
    ec_m5.estimated = true;

    let mut dynamo = ChannelProfile::new("dynamodb", 65.0, 8e-2);
    dynamo.max_item_bytes = Some(400 * 1024);
    dynamo.estimated = true;

    let ebs = ChannelProfile::new("ebs", 1950.0, 3e-5);
    let net_t2 = ChannelProfile::new("net_t2", 120.0, 5e-4);
    let net_c5 = ChannelProfile::new("net_c5", 225.0, 1.5e-4);

    let mut ps = ChannelProfile::new("ps_hybrid", 75.0 / 1.85, 1.5e-4);
    ps.startup_s = 132.0;
    ps.hourly_price_usd = 0.68;

    vec![s3, ec_t3, ec_m5, dynamo, ebs, net_t2, net_c5, ps]
}

pub fn lookup_profile(name: &str) -> Result<ChannelProfile> {
    builtin_profiles().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<String> = builtin_profiles().into_iter().map(|p| p.name).collect();
        Error::invalid(format!("unknown channel {name:?}; known: {}", names.join(", ")))
    })
}
