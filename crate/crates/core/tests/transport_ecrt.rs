use approxfl::channel::{rayleigh_ber_oracle, ChannelParams, Fading};
use approxfl::transport::{SchemeKind, Transport, TransportScheme};

/// P(Bin(n, p) > t) from the lower sum, term by term.
fn tail_by_summation(n: u64, p: f64, t: u64) -> f64 {
    let mut term = (1.0 - p).powi(n as i32);
    let mut lower = term;
    for k in 1..=t {
        term *= (n - k + 1) as f64 / k as f64 * p / (1.0 - p);
        lower += term;
    }
    1.0 - lower
}

#[test]
fn failure_rate_follows_binomial_tail() {
    let snr = 20.0;
    let t = Transport::new(TransportScheme::new(SchemeKind::Ecrt, 4), ChannelParams::with_snr(snr)).unwrap();
    let attempts = 20_000;
    let (rate, hw) = t.codeword_failure_rate(attempts, 11).unwrap();
    let expect = tail_by_summation(648, rayleigh_ber_oracle(4, snr).unwrap(), 7);
    assert!(expect > 0.005 && expect < 0.05, "{expect}");
    assert!((rate - expect).abs() <= 3.0 * hw, "measured {rate} ± {hw}, binomial {expect}");
}

#[test]
fn noiseless_link_schemes_agree() {
    let mut ch = ChannelParams::with_snr(f64::INFINITY);
    ch.fading = Fading::None;
    let g: Vec<f64> = (0..3000).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect();
    let mut outputs = Vec::new();
    for kind in [SchemeKind::Approximate, SchemeKind::Ecrt, SchemeKind::Naive] {
        let t = Transport::new(TransportScheme::new(kind, 16), ch).unwrap();
        let d = t.send(&g, 5).unwrap();
        assert_eq!(d.ledger.retransmissions, 0);
        outputs.push(d.received);
    }
    for o in &outputs {
        for (a, b) in o.iter().zip(&g) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn ecrt_costs_at_least_twice_the_payload() {
    let t = Transport::new(TransportScheme::new(SchemeKind::Ecrt, 16), ChannelParams::with_snr(25.0)).unwrap();
    let g = vec![0.25; 2000];
    let d = t.send(&g, 3).unwrap();
    assert_eq!(d.ledger.payload_bits, 64_000);
    assert!(d.ledger.coded_bits as f64 >= 2.0 * d.ledger.payload_bits as f64);
    assert_eq!(d.received, d.sent);
}
