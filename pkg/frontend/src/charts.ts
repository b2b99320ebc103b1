/** Dependency-free inline SVG snippets for the dashboard panels. */

export function sparklineSvg(values: number[], width = 220, height = 48): string {
    if (values.length === 0) {
        return `<svg class="spark" width="${width}" height="${height}"></svg>`;
    }
    const min = Math.min(...values);
    const max = Math.max(...values);
    const span = max - min || 1;
    const step = values.length > 1 ? width / (values.length - 1) : 0;
    const points = values
        .map((v, i) => `${(i * step).toFixed(1)},${(height - ((v - min) / span) * (height - 4) - 2).toFixed(1)}`)
        .join(" ");
    return `<svg class="spark" width="${width}" height="${height}" viewBox="0 0 ${width} ${height}">` +
        `<polyline fill="none" stroke="currentColor" stroke-width="1.5" points="${points}"/></svg>`;
}

export function barsSvg(pairs: { label: string; count: number }[], width = 220, barHeight = 14): string {
    const max = Math.max(1, ...pairs.map((p) => p.count));
    const rows = pairs
        .map((p, i) => {
            const w = ((p.count / max) * (width - 90)).toFixed(1);
            const y = i * (barHeight + 4);
            return (
                `<text x="0" y="${y + 11}" class="bar-label">${escapeXml(p.label)}</text>` +
                `<rect x="70" y="${y + 2}" width="${w}" height="${barHeight - 4}"/>` +
                `<text x="${74 + Number(w)}" y="${y + 11}" class="bar-count">${p.count}</text>`
            );
        })
        .join("");
    const height = pairs.length * (barHeight + 4) || barHeight;
    return `<svg class="bars" width="${width}" height="${height}">${rows}</svg>`;
}

export function escapeXml(text: string): string {
    return text
        .replace(/&/g, "&amp;")
        .replace(/</g, "&lt;")
        .replace(/>/g, "&gt;")
        .replace(/"/g, "&quot;");
}
