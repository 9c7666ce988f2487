//! Sampling, medians and their confidence intervals.

use std::time::Instant;

use super::BenchError;

/// Cycle counter plus monotonic clock. Cycles are read with RDTSCP where the
/// processor exposes it.
///
/// Reading the clocks around an empty body costs a few dozen nanoseconds.
/// That median cost is calibrated once and subtracted from every sample, so
/// cheap operations are not inflated relative to expensive ones.
#[derive(Clone, Copy, Debug)]
pub struct Clock {
    tsc: bool,
    overhead_ns: u64,
    overhead_cycles: u64,
}

#[cfg(target_arch = "x86_64")]
fn has_rdtscp() -> bool {
    // CPUID 0x8000_0001, EDX bit 27.
    let max = core::arch::x86_64::__cpuid(0x8000_0000).eax;
    max >= 0x8000_0001 && core::arch::x86_64::__cpuid(0x8000_0001).edx & (1 << 27) != 0
}

#[cfg(not(target_arch = "x86_64"))]
fn has_rdtscp() -> bool {
    false
}

impl Clock {
    /// Fails when the monotonic clock does not advance over ten million
    /// reads.
    pub fn detect() -> Result<Self, BenchError> {
        let start = Instant::now();
        let mut spins = 0u64;
        loop {
            let now = Instant::now();
            if now > start {
                break;
            }
            spins += 1;
            if spins > 10_000_000 {
                return Err(BenchError::ClockUnavailable("monotonic clock does not advance".into()));
            }
        }
        Ok(Clock::raw(has_rdtscp()).calibrated())
    }

    /// A clock that never reads the cycle counter.
    pub fn wall_only() -> Self {
        Clock::raw(false).calibrated()
    }

    fn raw(tsc: bool) -> Self {
        Clock { tsc, overhead_ns: 0, overhead_cycles: 0 }
    }

    fn calibrated(self) -> Self {
        let (mut ns, mut cycles) = sample(&self, 0, 20_001, |_| Ok::<_, ()>(())).unwrap();
        ns.sort_unstable();
        cycles.sort_unstable();
        Clock {
            overhead_ns: median(&ns) as u64,
            overhead_cycles: if self.tsc { median(&cycles) as u64 } else { 0 },
            ..self
        }
    }

    /// Median cost of the instrumentation itself, subtracted from samples.
    pub fn overhead_ns(&self) -> u64 {
        self.overhead_ns
    }

    pub fn has_cycles(&self) -> bool {
        self.tsc
    }

    #[inline]
    fn cycles(&self) -> u64 {
        #[cfg(target_arch = "x86_64")]
        if self.tsc {
            let mut aux = 0u32;
            return unsafe { core::arch::x86_64::__rdtscp(&mut aux) };
        }
        0
    }
}

/// Median and 95% interval of one measured operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub samples: usize,
    pub median_ns: f64,
    pub median_cycles: Option<f64>,
    pub ci_low_ns: f64,
    pub ci_high_ns: f64,
}

/// Median of sorted samples; the mean of the middle pair for even counts.
pub fn median(sorted: &[u64]) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "median of no samples");
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

/// Distribution-free 95% interval for the median: the order statistics at
/// ranks n/2 ∓ 1.96·√n/2.
pub fn median_ci(sorted: &[u64]) -> (f64, f64) {
    let n = sorted.len();
    assert!(n > 0, "interval of no samples");
    let half = 1.96 * (n as f64).sqrt() / 2.0;
    let lo = ((n as f64 / 2.0 - half).floor().max(1.0) as usize).min(n);
    let hi = ((n as f64 / 2.0 + half).ceil().max(1.0) as usize).min(n);
    (sorted[lo - 1] as f64, sorted[hi - 1] as f64)
}

/// Summarizes raw samples, which are sorted in place.
pub fn summarize(ns: &mut [u64], cycles: Option<&mut [u64]>) -> Summary {
    ns.sort_unstable();
    let (ci_low_ns, ci_high_ns) = median_ci(ns);
    let median_cycles = cycles.map(|c| {
        c.sort_unstable();
        median(c)
    });
    Summary { samples: ns.len(), median_ns: median(ns), median_cycles, ci_low_ns, ci_high_ns }
}

fn sample<E>(
    clock: &Clock,
    warmup: usize,
    iters: usize,
    mut f: impl FnMut(usize) -> Result<(), E>,
) -> Result<(Vec<u64>, Vec<u64>), E> {
    for i in 0..warmup {
        f(i)?;
    }
    let mut ns = Vec::with_capacity(iters);
    let mut cycles = Vec::with_capacity(if clock.tsc { iters } else { 0 });
    for i in warmup..warmup + iters {
        let c0 = clock.cycles();
        let t0 = Instant::now();
        f(i)?;
        let dt = t0.elapsed();
        let c1 = clock.cycles();
        ns.push((dt.as_nanos() as u64).saturating_sub(clock.overhead_ns));
        if clock.tsc {
            cycles.push(c1.wrapping_sub(c0).saturating_sub(clock.overhead_cycles));
        }
    }
    Ok((ns, cycles))
}

/// Runs `f` `warmup` times unmeasured, then `iters` times measured. `f`
/// receives the iteration index, counting on from the warmup.
pub fn measure<E>(
    clock: &Clock,
    warmup: usize,
    iters: usize,
    f: impl FnMut(usize) -> Result<(), E>,
) -> Result<Summary, E> {
    assert!(iters > 0, "at least one measured iteration");
    let (mut ns, mut cycles) = sample(clock, warmup, iters, f)?;
    Ok(summarize(&mut ns, clock.tsc.then_some(&mut cycles[..])))
}

/// Switches the calling thread to batch scheduling, which processes and
/// threads it creates afterwards inherit. A woken batch task does not
/// preempt the task that woke it; on a single CPU such preemption adds
/// context switches to every cross-process call that a multi-core host
/// would not see. Returns why it could not be applied, if it could not.
pub fn batch_scheduling() -> Result<(), String> {
    #[cfg(target_os = "linux")]
    unsafe {
        let param = libc::sched_param { sched_priority: 0 };
        if libc::sched_setscheduler(0, libc::SCHED_BATCH, &param) != 0 {
            return Err(format!("cannot select batch scheduling: {}", std::io::Error::last_os_error()));
        }
        Ok(())
    }
    #[cfg(not(target_os = "linux"))]
    Err("batch scheduling unsupported on this platform".into())
}

/// Pins the calling thread to `cpu` and raises the process priority where
/// permitted. Returns what could not be applied.
pub fn stabilize(cpu: Option<usize>) -> Vec<String> {
    let mut warnings = Vec::new();
    if let Some(cpu) = cpu {
        pin(cpu, &mut warnings);
    }
    #[cfg(unix)]
    unsafe {
        if libc::setpriority(libc::PRIO_PROCESS, 0, -10) != 0 {
            warnings.push(format!("cannot raise priority: {}", std::io::Error::last_os_error()));
        }
    }
    warnings
}

#[cfg(target_os = "linux")]
fn pin(cpu: usize, warnings: &mut Vec<String>) {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            warnings.push(format!("cannot pin to cpu {cpu}: {}", std::io::Error::last_os_error()));
        }
    }
}

#[cfg(not(target_os = "linux"))]
fn pin(cpu: usize, warnings: &mut Vec<String>) {
    warnings.push(format!("cpu pinning unsupported, cpu {cpu} ignored"));
}

/// Measures several bodies in alternating blocks of `block` iterations, so
/// drift in machine load affects each of them alike. Every body runs
/// `warmup` unmeasured and `iters` measured iterations.
pub fn measure_interleaved<E>(
    clock: &Clock,
    warmup: usize,
    iters: usize,
    block: usize,
    bodies: &mut [&mut dyn FnMut(usize) -> Result<(), E>],
) -> Result<Vec<Summary>, E> {
    assert!(iters > 0 && block > 0, "at least one measured iteration per block");
    for f in bodies.iter_mut() {
        for i in 0..warmup {
            f(i)?;
        }
    }
    let mut ns: Vec<Vec<u64>> = bodies.iter().map(|_| Vec::with_capacity(iters)).collect();
    let mut cycles: Vec<Vec<u64>> = bodies.iter().map(|_| Vec::with_capacity(iters)).collect();
    let mut done = 0;
    while done < iters {
        let n = block.min(iters - done);
        for (k, f) in bodies.iter_mut().enumerate() {
            let (a, b) = sample(clock, 0, n, |i| f(warmup + done + i))?;
            ns[k].extend(a);
            cycles[k].extend(b);
        }
        done += n;
    }
    Ok(ns.iter_mut().zip(cycles.iter_mut()).map(|(a, b)| summarize(a, clock.tsc.then_some(&mut b[..]))).collect())
}
