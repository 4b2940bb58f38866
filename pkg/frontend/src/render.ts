/** Canvas point-scatter renderer with a simple orbit camera.
 *
 * Rasterization is optional (tests run without a 2D context); everything
 * observable about the scene comes from buildScene.
 */

import type { Camera, Vec3 } from "./math3d.js";
import { project } from "./math3d.js";
import type { SceneItem } from "./scene.js";

const MAX_DRAW_POINTS = 1200;

export class ScatterView {
  camera: Camera = { yaw: 0.7, pitch: 0.5, zoom: 1 };
  private ctx: CanvasRenderingContext2D | null;
  private dragging = false;
  private lastX = 0;
  private lastY = 0;
  lastScene: SceneItem[] = [];

  constructor(private readonly canvas: HTMLCanvasElement) {
    this.ctx = canvas.getContext ? canvas.getContext("2d") : null;
    canvas.addEventListener("mousedown", (e) => {
      this.dragging = true;
      this.lastX = e.clientX;
      this.lastY = e.clientY;
    });
    canvas.addEventListener("mousemove", (e) => {
      if (!this.dragging) {
        return;
      }
      this.camera.yaw += (e.clientX - this.lastX) * 0.01;
      this.camera.pitch = Math.max(-1.4, Math.min(1.4, this.camera.pitch + (e.clientY - this.lastY) * 0.01));
      this.lastX = e.clientX;
      this.lastY = e.clientY;
      this.draw(this.lastScene);
    });
    canvas.addEventListener("mouseup", () => {
      this.dragging = false;
    });
    canvas.addEventListener("wheel", (e) => {
      this.camera.zoom *= e.deltaY < 0 ? 1.1 : 0.9;
      this.draw(this.lastScene);
      e.preventDefault();
    });
  }

  draw(scene: SceneItem[]) {
    this.lastScene = scene;
    const ctx = this.ctx;
    if (!ctx) {
      return;
    }
    const w = this.canvas.width;
    const h = this.canvas.height;
    ctx.fillStyle = "#16181c";
    ctx.fillRect(0, 0, w, h);
    const bound = sceneBound(scene);
    const scale = (Math.min(w, h) * 0.42) / bound;
    for (const item of scene) {
      ctx.fillStyle = item.color;
      ctx.globalAlpha = item.kind === "preview" ? 0.85 : 1.0;
      const stride = Math.max(1, Math.floor(item.points.length / MAX_DRAW_POINTS));
      const radius = item.kind.startsWith("slot") ? 6 : item.kind === "preview" ? 2.4 : 1.8;
      for (let i = 0; i < item.points.length; i += stride) {
        const p = this.project(item.points[i] as Vec3, scale, w, h);
        if (item.kind.startsWith("slot")) {
          ctx.beginPath();
          ctx.arc(p.x, p.y, radius, 0, Math.PI * 2);
          ctx.lineWidth = item.kind === "slot-active" ? 2.5 : 1.2;
          ctx.strokeStyle = item.color;
          ctx.stroke();
        } else {
          ctx.fillRect(p.x - radius / 2, p.y - radius / 2, radius, radius);
        }
      }
    }
    ctx.globalAlpha = 1.0;
  }

  private project(p: Vec3, scale: number, w: number, h: number) {
    const q = project(p, { ...this.camera, zoom: this.camera.zoom * scale });
    return { x: w / 2 + q.x, y: h / 2 + q.y };
  }
}

function sceneBound(scene: SceneItem[]): number {
  let bound = 1e-6;
  for (const item of scene) {
    for (const p of item.points) {
      bound = Math.max(bound, Math.abs(p[0]), Math.abs(p[1]), Math.abs(p[2]));
    }
  }
  return bound;
}
